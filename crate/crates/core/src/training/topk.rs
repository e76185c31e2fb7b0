/// Keeps the `k` best-scoring items. Equal scores rank the later step higher.
#[derive(Clone, Debug)]
pub struct TopKTracker<T> {
    k: usize,
    entries: Vec<TopKEntry<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopKEntry<T> {
    pub score: f64,
    pub step: usize,
    pub item: T,
}

impl<T> TopKTracker<T> {
    pub fn new(k: usize) -> Self {
        TopKTracker {
            k,
            entries: Vec::with_capacity(k + 1),
        }
    }

    fn outranks(a: (f64, usize), b: (f64, usize)) -> bool {
        a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
    }

    /// Offers an item; returns whatever falls out (the offered item itself
    /// when it does not make the cut).
    pub fn offer(&mut self, score: f64, step: usize, item: T) -> Option<TopKEntry<T>> {
        let entry = TopKEntry { score, step, item };
        if self.k == 0 {
            return Some(entry);
        }
        let pos = self
            .entries
            .iter()
            .position(|e| Self::outranks((score, step), (e.score, e.step)))
            .unwrap_or(self.entries.len());
        if pos >= self.k {
            return Some(entry);
        }
        self.entries.insert(pos, entry);
        if self.entries.len() > self.k {
            self.entries.pop()
        } else {
            None
        }
    }

    /// Entries, best first.
    pub fn entries(&self) -> &[TopKEntry<T>] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<TopKEntry<T>> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

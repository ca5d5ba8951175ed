//! Name-keyed lookup for interchangeable strategies (environments, graph
//! generator cores, decision modules, trainers).

use std::collections::BTreeMap;

use crate::error::{MagnetError, Result};

#[derive(Clone, Debug)]
pub struct Registry<T> {
    kind: &'static str,
    entries: BTreeMap<String, T>,
}

impl<T: Clone> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: T) -> &mut Self {
        self.entries.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Result<T> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| MagnetError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_lists_known_ones() {
        let mut r = Registry::new("widget");
        r.register("a", 1).register("b", 2);
        assert_eq!(r.get("b").unwrap(), 2);
        let msg = r.get("c").unwrap_err().to_string();
        assert!(msg.contains("widget") && msg.contains("a, b"), "{msg}");
    }
}

//! Topic names, topic filters and wildcard matching.
//!
//! A topic name is a `/`-separated list of levels. A filter may use `+` to
//! match exactly one level and a trailing `#` to match any remainder,
//! including zero levels (`a/#` matches `a`).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopicError {
    #[error("topic must not be empty")]
    Empty,
    #[error("topic name must not contain wildcard characters: {0:?}")]
    WildcardInName(String),
    #[error("'#' must be the last level of a filter: {0:?}")]
    MisplacedMultiLevel(String),
    #[error("wildcards must occupy a whole level: {0:?}")]
    PartialWildcard(String),
    #[error("topic must not contain NUL characters")]
    NulCharacter,
    #[error("topic longer than 65535 bytes")]
    TooLong,
}

/// A concrete topic a message is published to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TopicName(String);

impl TopicName {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicError> {
        let s = s.into();
        check_common(&s)?;
        if s.contains(['+', '#']) {
            return Err(TopicError::WildcardInName(s));
        }
        Ok(Self(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn levels(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    /// Bytes this topic occupies on the wire, excluding the 2-byte length prefix.
    pub fn overhead_bytes(&self) -> usize {
        self.0.len()
    }
}

/// A subscription pattern, possibly containing `+` and `#` wildcards.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TopicFilter(String);

impl TopicFilter {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicError> {
        let s = s.into();
        check_common(&s)?;
        let mut levels = s.split('/').peekable();
        while let Some(level) = levels.next() {
            let last = levels.peek().is_none();
            match level {
                "#" if !last => return Err(TopicError::MisplacedMultiLevel(s)),
                "#" | "+" => {}
                l if l.contains(['+', '#']) => return Err(TopicError::PartialWildcard(s)),
                _ => {}
            }
        }
        Ok(Self(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn levels(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    pub fn has_wildcards(&self) -> bool {
        self.0.contains(['+', '#'])
    }

    pub fn overhead_bytes(&self) -> usize {
        self.0.len()
    }

    /// Standard MQTT matching against a concrete name.
    pub fn matches(&self, name: &TopicName) -> bool {
        matches(self, name)
    }
}

impl From<TopicName> for TopicFilter {
    fn from(name: TopicName) -> Self {
        Self(name.0)
    }
}

fn check_common(s: &str) -> Result<(), TopicError> {
    if s.is_empty() {
        return Err(TopicError::Empty);
    }
    if s.len() > u16::MAX as usize {
        return Err(TopicError::TooLong);
    }
    if s.contains('\0') {
        return Err(TopicError::NulCharacter);
    }
    Ok(())
}

pub fn matches(filter: &TopicFilter, name: &TopicName) -> bool {
    let mut f = filter.levels();
    let mut n = name.levels();
    loop {
        match (f.next(), n.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(fl), Some(nl)) if fl == nl => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

/// Either kind of topic string, for overhead accounting in reports.
#[derive(Debug, Clone, Copy)]
pub enum AnyTopic<'a> {
    Name(&'a TopicName),
    Filter(&'a TopicFilter),
}

pub fn topic_overhead_bytes(t: AnyTopic<'_>) -> usize {
    match t {
        AnyTopic::Name(n) => n.overhead_bytes(),
        AnyTopic::Filter(f) => f.overhead_bytes(),
    }
}

macro_rules! string_conversions {
    ($ty:ident) => {
        impl TryFrom<String> for $ty {
            type Error = TopicError;
            fn try_from(s: String) -> Result<Self, Self::Error> {
                Self::new(s)
            }
        }

        impl From<$ty> for String {
            fn from(t: $ty) -> String {
                t.0
            }
        }

        impl FromStr for $ty {
            type Err = TopicError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::new(s)
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl AsRef<str> for $ty {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }
    };
}

string_conversions!(TopicName);
string_conversions!(TopicFilter);

#[derive(Debug)]
struct Node<V> {
    children: HashMap<String, Node<V>>,
    single: Option<Box<Node<V>>>,
    // values stored for a filter ending in `#` at this node
    multi: Vec<V>,
    // values stored for a filter ending exactly at this node
    exact: Vec<V>,
}

impl<V> Default for Node<V> {
    fn default() -> Self {
        Self {
            children: HashMap::new(),
            single: None,
            multi: Vec::new(),
            exact: Vec::new(),
        }
    }
}

impl<V> Node<V> {
    fn is_empty(&self) -> bool {
        self.children.is_empty() && self.single.is_none() && self.multi.is_empty() && self.exact.is_empty()
    }
}

/// Level trie of subscriptions. Lookup cost is linear in topic depth
/// (times the wildcard branching actually present).
#[derive(Debug)]
pub struct SubscriptionTrie<V> {
    root: Node<V>,
    len: usize,
}

impl<V> Default for SubscriptionTrie<V> {
    fn default() -> Self {
        Self {
            root: Node::default(),
            len: 0,
        }
    }
}

impl<V: PartialEq> SubscriptionTrie<V> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn insert(&mut self, filter: &TopicFilter, value: V) {
        let mut node = &mut self.root;
        let mut levels = filter.levels().peekable();
        while let Some(level) = levels.next() {
            if level == "#" {
                node.multi.push(value);
                self.len += 1;
                return;
            }
            node = if level == "+" {
                node.single.get_or_insert_with(Default::default)
            } else {
                node.children.entry(level.to_owned()).or_default()
            };
            if levels.peek().is_none() {
                node.exact.push(value);
                self.len += 1;
                return;
            }
        }
    }

    /// Removes one entry equal to `value` stored under `filter`.
    pub fn remove(&mut self, filter: &TopicFilter, value: &V) -> bool {
        let levels: Vec<&str> = filter.levels().collect();
        let removed = remove_rec(&mut self.root, &levels, value);
        if removed {
            self.len -= 1;
        }
        removed
    }

    /// Removes every value matching the predicate, wherever stored.
    pub fn retain(&mut self, mut keep: impl FnMut(&V) -> bool) {
        let mut removed = 0;
        retain_rec(&mut self.root, &mut keep, &mut removed);
        self.len -= removed;
    }

    /// Calls `f` for every stored value whose filter matches `name`.
    pub fn for_each_match<'a>(&'a self, name: &TopicName, mut f: impl FnMut(&'a V)) {
        let levels: Vec<&str> = name.levels().collect();
        walk(&self.root, &levels, &mut f);
    }

    pub fn matches<'a>(&'a self, name: &TopicName) -> Vec<&'a V> {
        let mut out = Vec::new();
        self.for_each_match(name, |v| out.push(v));
        out
    }
}

fn walk<'a, V>(node: &'a Node<V>, levels: &[&str], f: &mut impl FnMut(&'a V)) {
    node.multi.iter().for_each(&mut *f);
    match levels.split_first() {
        None => node.exact.iter().for_each(f),
        Some((head, rest)) => {
            if let Some(child) = node.children.get(*head) {
                walk(child, rest, f);
            }
            if let Some(single) = &node.single {
                walk(single, rest, f);
            }
        }
    }
}

fn remove_rec<V: PartialEq>(node: &mut Node<V>, levels: &[&str], value: &V) -> bool {
    let Some((head, rest)) = levels.split_first() else {
        return false;
    };
    if *head == "#" {
        return take_one(&mut node.multi, value);
    }
    let child = if *head == "+" {
        node.single.as_deref_mut()
    } else {
        node.children.get_mut(*head)
    };
    let Some(child) = child else { return false };
    let removed = if rest.is_empty() {
        take_one(&mut child.exact, value)
    } else {
        remove_rec(child, rest, value)
    };
    if removed && child.is_empty() {
        if *head == "+" {
            node.single = None;
        } else {
            node.children.remove(*head);
        }
    }
    removed
}

fn take_one<V: PartialEq>(values: &mut Vec<V>, value: &V) -> bool {
    match values.iter().position(|v| v == value) {
        Some(i) => {
            values.swap_remove(i);
            true
        }
        None => false,
    }
}

fn retain_rec<V>(node: &mut Node<V>, keep: &mut impl FnMut(&V) -> bool, removed: &mut usize) {
    let before = node.multi.len() + node.exact.len();
    node.multi.retain(|v| keep(v));
    node.exact.retain(|v| keep(v));
    *removed += before - node.multi.len() - node.exact.len();
    for child in node.children.values_mut() {
        retain_rec(child, keep, removed);
    }
    node.children.retain(|_, c| !c.is_empty());
    if let Some(single) = node.single.as_deref_mut() {
        retain_rec(single, keep, removed);
        if single.is_empty() {
            node.single = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn name(s: &str) -> TopicName {
        TopicName::new(s).unwrap()
    }

    fn filter(s: &str) -> TopicFilter {
        TopicFilter::new(s).unwrap()
    }

    #[test]
    fn wildcard_examples() {
        assert!(matches(&filter("providers/p1/#"), &name("providers/p1/hub1")));
        assert!(matches(&filter("providers/+/hub1"), &name("providers/p2/hub1")));
        assert!(!matches(&filter("providers/p1/#"), &name("providers/p2/hub1")));
    }

    #[test]
    fn hash_matches_parent_level() {
        assert!(matches(&filter("a/#"), &name("a")));
        assert!(matches(&filter("#"), &name("a/b/c")));
        assert!(!matches(&filter("a/+"), &name("a")));
        assert!(matches(&filter("a/+"), &name("a/")));
    }

    #[test]
    fn invalid_topics_rejected() {
        assert_eq!(TopicName::new(""), Err(TopicError::Empty));
        assert!(matches!(TopicName::new("a/+"), Err(TopicError::WildcardInName(_))));
        assert!(matches!(
            TopicFilter::new("a/#/b"),
            Err(TopicError::MisplacedMultiLevel(_))
        ));
        assert!(matches!(TopicFilter::new("a/b+"), Err(TopicError::PartialWildcard(_))));
        assert!(matches!(TopicFilter::new("a#"), Err(TopicError::PartialWildcard(_))));
        assert_eq!(TopicName::new("a\0b"), Err(TopicError::NulCharacter));
    }

    #[test]
    fn overhead_is_utf8_length() {
        assert_eq!(topic_overhead_bytes(AnyTopic::Name(&name("a"))), 1);
        assert_eq!(topic_overhead_bytes(AnyTopic::Name(&name("ø/å"))), 5);
        assert_eq!(topic_overhead_bytes(AnyTopic::Filter(&filter("sensors/prov1/#"))), 15);
    }

    #[test]
    fn trie_insert_remove() {
        let mut trie = SubscriptionTrie::new();
        trie.insert(&filter("a/+/c"), 1);
        trie.insert(&filter("a/#"), 2);
        trie.insert(&filter("a/b/c"), 3);
        let mut got: Vec<_> = trie.matches(&name("a/b/c")).into_iter().copied().collect();
        got.sort();
        assert_eq!(got, vec![1, 2, 3]);
        assert!(trie.remove(&filter("a/+/c"), &1));
        assert!(!trie.remove(&filter("a/+/c"), &1));
        trie.retain(|v| *v != 3);
        assert_eq!(trie.len(), 1);
        assert_eq!(trie.matches(&name("a/b/c")), vec![&2]);
        assert!(trie.root.single.is_none());
    }
}

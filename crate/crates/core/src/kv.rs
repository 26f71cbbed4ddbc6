//! Flat `key = value` text files with `#` comments.
//!
//! Used for service configs, scenario files and nothing fancier. Keys may
//! repeat; callers decide whether that is meaningful.

use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given more than once")]
    Repeated { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("missing required key `{0}`")]
    Missing(String),
}

impl KvError {
    /// The offending key, when the error concerns one.
    pub fn key(&self) -> Option<&str> {
        match self {
            KvError::UnknownKey { key, .. }
            | KvError::Repeated { key, .. }
            | KvError::BadValue { key, .. } => Some(key),
            KvError::Missing(key) => Some(key),
            KvError::Syntax { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

impl Entry {
    pub fn parse<T: FromStr>(&self) -> Result<T, KvError>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e: T::Err| KvError::BadValue {
            line: self.line,
            key: self.key.clone(),
            reason: e.to_string(),
        })
    }

    pub fn bad(&self, reason: impl Into<String>) -> KvError {
        KvError::BadValue {
            line: self.line,
            key: self.key.clone(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvFile {
    entries: Vec<Entry>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(KvError::Syntax { line })?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(KvError::Syntax { line });
            }
            entries.push(Entry {
                line,
                key: key.to_string(),
                value: value.trim().to_string(),
            });
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// Fails on the first key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), KvError> {
        match self.entries.iter().find(|e| !allowed.contains(&e.key.as_str())) {
            Some(e) => Err(KvError::UnknownKey {
                line: e.line,
                key: e.key.clone(),
            }),
            None => Ok(()),
        }
    }

    /// The single entry for `key`; repeating it is an error.
    pub fn single(&self, key: &str) -> Result<Option<&Entry>, KvError> {
        let mut found = self.entries.iter().filter(|e| e.key == key);
        let first = found.next();
        if let Some(dup) = found.next() {
            return Err(KvError::Repeated {
                line: dup.line,
                key: key.to_string(),
            });
        }
        Ok(first)
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError>
    where
        T::Err: std::fmt::Display,
    {
        self.single(key)?.map(Entry::parse).transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, KvError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let kv = KvFile::parse("# header\n\nlisten = 127.0.0.1:7000  # inline\nstore=/tmp/x\n")
            .unwrap();
        assert_eq!(kv.entries().len(), 2);
        assert_eq!(kv.get::<String>("listen").unwrap().unwrap(), "127.0.0.1:7000");
        assert_eq!(kv.entries()[1].line, 4);
    }

    #[test]
    fn reports_line_numbers() {
        assert_eq!(
            KvFile::parse("a = 1\nbroken\n").unwrap_err(),
            KvError::Syntax { line: 2 }
        );
        let kv = KvFile::parse("a = 1\nbogus = 2\n").unwrap();
        let err = kv.check_keys(&["a"]).unwrap_err();
        assert_eq!(err.key(), Some("bogus"));
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn typed_values() {
        let kv = KvFile::parse("n = 12\nx = abc\nn2 = 1\nn2 = 2").unwrap();
        assert_eq!(kv.get::<u32>("n").unwrap(), Some(12));
        assert!(matches!(kv.get::<u32>("x"), Err(KvError::BadValue { line: 2, .. })));
        assert!(matches!(kv.get::<u32>("n2"), Err(KvError::Repeated { line: 4, .. })));
        assert_eq!(kv.get_or("missing", 7u32).unwrap(), 7);
        assert_eq!(kv.all("n2").count(), 2);
    }
}

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered set of label symbols. Order defines class indices and every
/// tie-break. A charset without lowercase letters is case-insensitive:
/// lowercase input folds to uppercase.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Charset {
    symbols: Vec<char>,
}

impl Charset {
    pub fn new(symbols: &str) -> Result<Self> {
        let chars: Vec<char> = symbols.chars().collect();
        if chars.is_empty() {
            return Err(Error::param("charset is empty"));
        }
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::param(format!("charset repeats {c:?}")));
            }
            if c.is_whitespace() || c.is_control() {
                return Err(Error::param(format!("charset contains unprintable {c:?}")));
            }
        }
        Ok(Self { symbols: chars })
    }

    pub fn digits() -> Self {
        Self::new("0123456789").unwrap()
    }

    /// Digits and uppercase letters, 36 classes.
    pub fn alnum() -> Self {
        Self::new("0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ").unwrap()
    }

    /// Digits, uppercase and lowercase letters, 62 classes.
    pub fn alnum_cased() -> Self {
        Self::new("0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz").unwrap()
    }

    /// Resolves a preset name (`digits`, `alnum`, `alnum62`) or a literal symbol list.
    pub fn parse(spec: &str) -> Result<Self> {
        match spec {
            "digits" => Ok(Self::digits()),
            "alnum" | "alnum36" => Ok(Self::alnum()),
            "alnum62" => Ok(Self::alnum_cased()),
            other => Self::new(other),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.symbols
    }

    pub fn symbol(&self, index: usize) -> char {
        self.symbols[index]
    }

    pub fn is_case_insensitive(&self) -> bool {
        !self.symbols.iter().any(|c| c.is_lowercase())
    }

    /// Maps a character onto the charset, applying case folding when the
    /// charset is case-insensitive.
    pub fn fold(&self, c: char) -> Option<char> {
        if self.symbols.contains(&c) {
            return Some(c);
        }
        if self.is_case_insensitive() {
            let up = c.to_uppercase().next()?;
            if self.symbols.contains(&up) {
                return Some(up);
            }
        }
        None
    }

    pub fn index(&self, c: char) -> Option<usize> {
        let c = self.fold(c)?;
        self.symbols.iter().position(|&s| s == c)
    }

    pub fn fold_label(&self, label: &str) -> Result<String> {
        label
            .chars()
            .map(|c| self.fold(c).ok_or(Error::Charset(c)))
            .collect()
    }

    /// Folding used when comparing answers: unknown characters pass through
    /// so that a wrong answer stays wrong instead of erroring.
    pub fn normalize_answer(&self, answer: &str) -> String {
        answer.chars().map(|c| self.fold(c).unwrap_or(c)).collect()
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }
}

impl Default for Charset {
    fn default() -> Self {
        Self::alnum()
    }
}

impl fmt::Display for Charset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_string())
    }
}

impl TryFrom<String> for Charset {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::new(&s)
    }
}

impl From<Charset> for String {
    fn from(c: Charset) -> String {
        c.as_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folding() {
        let c = Charset::alnum();
        assert_eq!(c.len(), 36);
        assert_eq!(c.fold_label("Mq42").unwrap(), "MQ42");
        assert!(matches!(c.fold_label("a-b"), Err(Error::Charset('-'))));
        let cased = Charset::alnum_cased();
        assert_eq!(cased.fold('q'), Some('q'));
        assert_eq!(Charset::digits().fold('a'), None);
        assert_eq!(c.normalize_answer("ab-1"), "AB-1");
    }

    #[test]
    fn rejects_duplicates() {
        assert!(Charset::new("AA").is_err());
        assert!(Charset::new("").is_err());
        assert_eq!(Charset::parse("digits").unwrap(), Charset::digits());
        let json = serde_json::to_string(&Charset::digits()).unwrap();
        assert_eq!(json, "\"0123456789\"");
        assert!(serde_json::from_str::<Charset>("\"00\"").is_err());
    }
}

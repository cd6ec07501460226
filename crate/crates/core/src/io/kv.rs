//! Line-oriented `key=value` files. Repeated keys are allowed (they form
//! lists); `#` starts a comment; blank lines are ignored.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("line {}: expected key=value", lineno + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::format(format!("{}: {}", path.display(), e)))?;
    parse_kv(&text)
}

pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// First value for `key`, parsed; error if absent.
pub fn required<T: std::str::FromStr>(pairs: &[(String, String)], key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = pairs
        .iter()
        .find(|(k, _)| k == key)
        .ok_or_else(|| Error::format(format!("missing key '{key}'")))?;
    v.1.parse::<T>().map_err(|e| Error::format(format!("key '{key}': {e}")))
}

/// First value for `key`, parsed; `default` if absent.
pub fn optional<T: std::str::FromStr>(pairs: &[(String, String)], key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match pairs.iter().find(|(k, _)| k == key) {
        None => Ok(default),
        Some((_, v)) => v.parse::<T>().map_err(|e| Error::format(format!("key '{key}': {e}"))),
    }
}

/// All values for a repeated `key`, in file order.
pub fn repeated<'a>(pairs: &'a [(String, String)], key: &str) -> Vec<&'a str> {
    pairs.iter().filter(|(k, _)| k == key).map(|(_, v)| v.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_repeats() {
        let pairs = parse_kv("# header\na=1\n\nb = two \na=3\n").unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(required::<i32>(&pairs, "a").unwrap(), 1);
        assert_eq!(repeated(&pairs, "a"), vec!["1", "3"]);
        assert_eq!(required::<String>(&pairs, "b").unwrap(), "two");
        assert_eq!(optional::<i32>(&pairs, "c", 9).unwrap(), 9);
    }

    #[test]
    fn rejects_non_kv_lines() {
        assert!(parse_kv("just a line\n").is_err());
    }
}

//! Small shared helpers: text normalization, hashing, atomic file writes,
//! and a bounded parallel map.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Seed for the 64-bit FNV-1a hash used everywhere a stable, platform-free
/// token or id hash is needed.
pub const FNV_SEED: u64 = 0x9E37_79B9_7F4A_7C15;
const FNV_PRIME: u64 = 0x0000_0100_0000_01B3;

/// Seeded FNV-1a over raw bytes. Stable across platforms and releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_SEED;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Collapse runs of whitespace to single spaces and trim the ends.
pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Canonical form used for matching answers against labels: NFC, lowercase,
/// hyphens/underscores as spaces, whitespace runs collapsed.
pub fn normalize_for_match(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    let lowered = nfc.to_lowercase();
    let spaced: String = lowered
        .chars()
        .map(|c| if c == '-' || c == '_' { ' ' } else { c })
        .collect();
    collapse_whitespace(&spaced)
}

/// Canonical form hashed into cache keys: trimmed and NFC-normalized, so
/// inputs differing only in surrounding whitespace or normalization form
/// produce identical keys.
pub fn canonicalize_for_hash(s: &str) -> String {
    s.trim().nfc().collect()
}

/// Hex-encoded SHA-256 of the canonicalized parts joined with a fixed
/// separator (ASCII unit separator, which cannot survive canonicalization
/// inside a part unescaped ambiguity-free, and never appears in normal text).
pub fn content_hash(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f_u8]);
        }
        hasher.update(canonicalize_for_hash(part).as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Hex-encoded SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `bytes` to `path` atomically: write a sibling temp file, then rename
/// over the destination. Readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path
        .parent()
        .ok_or_else(|| Error::Validation(format!("path has no parent: {}", path.display())))?;
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a file to a string with the path attached to any error.
pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Apply `f` to every item under a bounded worker pool, preserving input
/// order in the output. `workers == 1` degenerates to a sequential loop, and
/// item failures are returned in place rather than aborting the batch.
pub fn parallel_map<T, U, F>(items: Vec<T>, workers: usize, f: F) -> Vec<Result<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let workers = workers.max(1);
    if workers == 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<U>>>> =
        items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_is_stable() {
        // Frozen values: these must never change or cached artifacts would
        // silently stop matching across releases.
        assert_eq!(fnv1a64(b""), FNV_SEED);
        let a = fnv1a64(b"bright");
        let b = fnv1a64(b"bright");
        assert_eq!(a, b);
        assert_ne!(fnv1a64(b"bright"), fnv1a64(b"Bright"));
    }

    #[test]
    fn match_normalization() {
        assert_eq!(normalize_for_match("Yellow_breasted_Chat"), "yellow breasted chat");
        assert_eq!(normalize_for_match("  Bell-Pepper   LEAF "), "bell pepper leaf");
    }

    #[test]
    fn hash_canonicalization_ignores_outer_whitespace_and_nfc() {
        // U+00E9 (precomposed) vs U+0065 U+0301 (decomposed) must hash equal.
        let precomposed = "caf\u{00e9}";
        let decomposed = "cafe\u{0301}";
        assert_eq!(content_hash(&[precomposed]), content_hash(&[decomposed]));
        assert_eq!(content_hash(&[" abc  "]), content_hash(&["abc"]));
        assert_ne!(content_hash(&["a", "b"]), content_hash(&["ab"]));
    }

    #[test]
    fn atomic_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.json");
        write_atomic(&path, b"{}").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"{}");
        write_atomic(&path, b"[1]").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"[1]");
    }

    #[test]
    fn parallel_map_preserves_order_and_isolates_failures() {
        let items: Vec<u32> = (0..100).collect();
        let out = parallel_map(items, 4, |&x| {
            if x == 13 {
                Err(Error::Validation("boom".into()))
            } else {
                Ok(x * 2)
            }
        });
        assert_eq!(out.len(), 100);
        for (i, r) in out.iter().enumerate() {
            if i == 13 {
                assert!(r.is_err());
            } else {
                assert_eq!(*r.as_ref().unwrap(), (i as u32) * 2);
            }
        }
    }
}

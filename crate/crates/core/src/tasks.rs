//! Byte-level datasets: copy/reverse, parity of marked bytes, and text.

use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: u32 = 0x02;
pub const SEP: u32 = b'|' as u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Example {
    /// Next-token prediction. Row `r` is scored when `r + 1 >= loss_start`.
    /// With `prompt_len` set, later positions are decode positions.
    Lm {
        tokens: Vec<u32>,
        prompt_len: Option<usize>,
        loss_start: usize,
    },
    Class { tokens: Vec<u32>, label: usize },
}

impl Example {
    pub fn tokens(&self) -> &[u32] {
        match self {
            Example::Lm { tokens, .. } | Example::Class { tokens, .. } => tokens,
        }
    }

    pub fn prompt_len(&self) -> Option<usize> {
        match self {
            Example::Lm { prompt_len, .. } => *prompt_len,
            Example::Class { .. } => None,
        }
    }

    /// `(position, target)` pairs scored for this example, given the
    /// positions whose logits exist.
    pub fn lm_targets(&self, positions: &[usize]) -> Vec<(usize, usize)> {
        match self {
            Example::Lm { tokens, loss_start, .. } => positions
                .iter()
                .enumerate()
                .filter(|&(_, &p)| p + 1 >= *loss_start && p + 1 < tokens.len())
                .map(|(row, &p)| (row, tokens[p + 1] as usize))
                .collect(),
            Example::Class { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Perplexity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub metric: Metric,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.tokens().len()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    /// `BOS src | src`, with `src` of length `min_len..=max_len` drawn from
    /// the first `alphabet` lowercase letters.
    Copy { min_len: usize, max_len: usize, alphabet: usize },
    /// `BOS src | reverse(src)`.
    Reverse { min_len: usize, max_len: usize, alphabet: usize },
    /// Lowercase text with some letters upper-cased; label is the parity of
    /// the upper-case count.
    Parity { len: usize },
    /// Consecutive `chunk`-byte windows of a text.
    Text { text: Vec<u8>, chunk: usize },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Copy { .. } => "copy",
            Task::Reverse { .. } => "reverse",
            Task::Parity { .. } => "parity",
            Task::Text { .. } => "text",
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Task::Parity { .. })
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.is_classification().then_some(2)
    }

    /// `n` examples drawn with `seed` (text tasks ignore both and use every chunk).
    pub fn build(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (metric, examples) = match self {
            Task::Copy { min_len, max_len, alphabet } => {
                (Metric::Accuracy, seq2seq(*min_len..=*max_len, *alphabet, n, false, &mut rng)?)
            }
            Task::Reverse { min_len, max_len, alphabet } => {
                (Metric::Accuracy, seq2seq(*min_len..=*max_len, *alphabet, n, true, &mut rng)?)
            }
            Task::Parity { len } => (Metric::Accuracy, parity(*len, n, &mut rng)?),
            Task::Text { text, chunk } => (Metric::Perplexity, text_chunks(text, *chunk)?),
        };
        Ok(Dataset {
            name: self.name().into(),
            metric,
            examples,
        })
    }
}

fn seq2seq<R: Rng>(
    lens: RangeInclusive<usize>,
    alphabet: usize,
    n: usize,
    reverse: bool,
    rng: &mut R,
) -> Result<Vec<Example>> {
    if *lens.start() == 0 || lens.is_empty() {
        return Err(Error::config("min_len", "need 1 <= min_len <= max_len"));
    }
    if !(1..=26).contains(&alphabet) {
        return Err(Error::config("alphabet", "must be in 1..=26"));
    }
    Ok((0..n)
        .map(|_| {
            let len = rng.random_range(lens.clone());
            let src: Vec<u32> = (0..len).map(|_| b'a' as u32 + rng.random_range(0..alphabet as u32)).collect();
            let mut tokens = vec![BOS];
            tokens.extend(&src);
            tokens.push(SEP);
            let prompt_len = tokens.len();
            if reverse {
                tokens.extend(src.iter().rev());
            } else {
                tokens.extend(&src);
            }
            Example::Lm {
                tokens,
                prompt_len: Some(prompt_len),
                loss_start: prompt_len,
            }
        })
        .collect())
}

fn parity<R: Rng>(len: usize, n: usize, rng: &mut R) -> Result<Vec<Example>> {
    if len == 0 {
        return Err(Error::config("len", "must be positive"));
    }
    Ok((0..n)
        .map(|_| {
            let mut upper = 0;
            let tokens = (0..len)
                .map(|_| {
                    let c = b'a' + rng.random_range(0..26u8);
                    if rng.random_bool(0.25) {
                        upper += 1;
                        c.to_ascii_uppercase() as u32
                    } else {
                        c as u32
                    }
                })
                .collect();
            Example::Class { tokens, label: upper % 2 }
        })
        .collect())
}

fn text_chunks(text: &[u8], chunk: usize) -> Result<Vec<Example>> {
    if chunk < 2 {
        return Err(Error::config("chunk", "must be at least 2"));
    }
    if text.len() < chunk {
        return Err(Error::Dataset(format!("text of {} bytes is shorter than one {chunk}-byte chunk", text.len())));
    }
    Ok(text
        .chunks_exact(chunk)
        .map(|c| Example::Lm {
            tokens: c.iter().map(|&b| b as u32).collect(),
            prompt_len: None,
            loss_start: 1,
        })
        .collect())
}

/// Random split into `(train, held_out)` with `held_out` examples set aside.
pub fn split(mut data: Dataset, held_out: usize, seed: u64) -> (Dataset, Dataset) {
    data.examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = data.examples.len().saturating_sub(held_out);
    let test = data.examples.split_off(cut);
    let test = Dataset {
        name: data.name.clone(),
        metric: data.metric,
        examples: test,
    };
    (data, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_layout() {
        let d = Task::Copy { min_len: 4, max_len: 4, alphabet: 3 }.build(5, 1).unwrap();
        for e in &d.examples {
            let t = e.tokens();
            assert_eq!(t.len(), 10);
            assert_eq!(t[0], BOS);
            assert_eq!(t[5], SEP);
            assert_eq!(t[1..5], t[6..10]);
            assert!(t[1..5].iter().all(|&c| (b'a' as u32..b'd' as u32).contains(&c)));
            assert_eq!(e.prompt_len(), Some(6));
        }
    }

    #[test]
    fn reverse_layout() {
        let d = Task::Reverse { min_len: 5, max_len: 5, alphabet: 26 }.build(3, 2).unwrap();
        for e in &d.examples {
            let t = e.tokens();
            let back: Vec<u32> = t[7..].iter().rev().copied().collect();
            assert_eq!(&t[1..6], back.as_slice());
        }
    }

    #[test]
    fn copy_targets_are_the_source() {
        let d = Task::Copy { min_len: 3, max_len: 3, alphabet: 26 }.build(1, 3).unwrap();
        let e = &d.examples[0];
        let t = e.tokens().to_vec();
        let all: Vec<usize> = (0..t.len()).collect();
        let targets = e.lm_targets(&all);
        assert_eq!(targets.len(), 3);
        assert_eq!(targets[0], (4, t[1] as usize));
        assert_eq!(targets[2], (6, t[3] as usize));
    }

    #[test]
    fn variable_lengths_span_range() {
        let d = Task::Copy { min_len: 3, max_len: 5, alphabet: 4 }.build(200, 8).unwrap();
        let mut seen = [false; 6];
        for e in &d.examples {
            let p = e.prompt_len().unwrap();
            let src = p - 2;
            seen[src] = true;
            assert_eq!(e.tokens().len(), 2 * src + 2);
        }
        assert_eq!(seen, [false, false, false, true, true, true]);
        assert!(Task::Copy { min_len: 5, max_len: 3, alphabet: 4 }.build(1, 0).is_err());
    }

    #[test]
    fn parity_labels() {
        let d = Task::Parity { len: 12 }.build(50, 4).unwrap();
        for e in &d.examples {
            let Example::Class { tokens, label } = e else { panic!() };
            let upper = tokens.iter().filter(|&&c| (c as u8).is_ascii_uppercase()).count();
            assert_eq!(*label, upper % 2);
        }
    }

    #[test]
    fn text_chunks_cover_prefix() {
        let d = Task::Text { text: b"abcdefghij".to_vec(), chunk: 4 }.build(0, 0).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.examples[1].tokens(), &[b'e' as u32, b'f' as u32, b'g' as u32, b'h' as u32]);
        assert!(Task::Text { text: b"ab".to_vec(), chunk: 4 }.build(0, 0).is_err());
    }

    #[test]
    fn seeded() {
        let t = Task::Copy { min_len: 2, max_len: 6, alphabet: 10 };
        assert_eq!(t.build(4, 9).unwrap(), t.build(4, 9).unwrap());
        assert_ne!(t.build(4, 9).unwrap(), t.build(4, 10).unwrap());
    }

    #[test]
    fn split_sizes() {
        let d = Task::Parity { len: 4 }.build(10, 0).unwrap();
        let (a, b) = split(d, 3, 0);
        assert_eq!((a.len(), b.len()), (7, 3));
    }
}

use std::path::Path;

use crate::arch::ModelParams;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::report::{g12, write_csv};
use crate::tensor::Scalar;
use crate::training::{bpc, eval_threads, score_positions};

/// A run of at least two letters `a`–`z` with a space token directly
/// before and after it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Word {
    pub start: usize,
    pub len: usize,
}

pub fn find_words(tokens: &[usize], vocab: &Vocab) -> Vec<Word> {
    let Some(space) = vocab.byte_id(b' ') else {
        return Vec::new();
    };
    let mut letter = vec![false; vocab.size()];
    for b in b'a'..=b'z' {
        if let Some(id) = vocab.byte_id(b) {
            letter[id] = true;
        }
    }
    let is_letter = |t: usize| letter.get(t).copied().unwrap_or(false);
    let mut words = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i] != space {
            i += 1;
            continue;
        }
        let start = i + 1;
        let mut end = start;
        while end < tokens.len() && is_letter(tokens[end]) {
            end += 1;
        }
        if end < tokens.len() && tokens[end] == space && end - start >= 2 {
            words.push(Word { start, len: end - start });
        }
        i = end.max(i + 1);
    }
    words
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionBpcReport {
    pub models: Vec<String>,
    /// `bpc[model][p − 1]`
    pub bpc: Vec<Vec<f64>>,
    /// Words long enough to have position `p`.
    pub counts: Vec<usize>,
}

impl PositionBpcReport {
    /// `(model − reference) / reference` with the first model as reference.
    pub fn relative_loss(&self, model: usize, position: usize) -> f64 {
        let r = self.bpc[0][position - 1];
        (self.bpc[model][position - 1] - r) / r
    }

    pub fn rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for (m, name) in self.models.iter().enumerate() {
            for p in 1..=self.counts.len() {
                rows.push(vec![
                    name.clone(),
                    p.to_string(),
                    g12(self.bpc[m][p - 1]),
                    self.counts[p - 1].to_string(),
                    g12(self.relative_loss(m, p)),
                ]);
            }
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, "model,position,bpc,count,relative_loss", &self.rows())
    }
}

/// Mean BPC at each in-word position 1..=`max_pos`, for every model, scored
/// over `tokens` in `batch` lanes. Words crossing a lane boundary are
/// skipped.
pub fn position_bpc<T: Scalar>(
    models: &[(String, &ModelParams<T>)],
    vocab: &Vocab,
    tokens: &[usize],
    max_pos: usize,
    batch: usize,
) -> Result<PositionBpcReport> {
    if models.is_empty() || max_pos == 0 {
        return Err(Error::Config("position BPC needs a model and max_pos ≥ 1".into()));
    }
    if models.iter().any(|(_, p)| p.spec.vocab != vocab.size()) {
        return Err(Error::Data("model vocabulary does not match the corpus".into()));
    }
    let lane = tokens.len() / batch.max(1);
    let scored = |j: usize| j < lane * batch && !j.is_multiple_of(lane);
    let words: Vec<Word> = find_words(tokens, vocab)
        .into_iter()
        .filter(|w| (w.start..w.start + w.len).all(scored) && (w.start / lane) == ((w.start + w.len - 1) / lane))
        .collect();
    if words.is_empty() {
        return Err(Error::Data("no words found in the evaluation text".into()));
    }
    let mut counts = vec![0usize; max_pos];
    for w in &words {
        for c in counts.iter_mut().take(w.len.min(max_pos)) {
            *c += 1;
        }
    }
    let mut out = Vec::with_capacity(models.len());
    for (_, params) in models {
        let nll = score_positions(*params, tokens, batch, eval_threads())?;
        let index = |j: usize| (j / lane) * (lane - 1) + j % lane - 1;
        let mut sums = vec![0.0; max_pos];
        for w in &words {
            for (p, s) in sums.iter_mut().enumerate().take(w.len.min(max_pos)) {
                *s += nll[index(w.start + p)];
            }
        }
        out.push(
            sums.iter()
                .zip(&counts)
                .map(|(s, &c)| if c == 0 { f64::NAN } else { bpc(s / c as f64) })
                .collect(),
        );
    }
    Ok(PositionBpcReport {
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        bpc: out,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchitectureSpec;
    use crate::data::TokenMode;

    fn vocab_and_tokens(text: &str) -> (Vocab, Vec<usize>) {
        let symbols = TokenMode::PtbChars.tokenize(text.as_bytes()).unwrap();
        let v = Vocab::build(TokenMode::PtbChars, &symbols, false).unwrap();
        let t = v.encode(&symbols).unwrap();
        (v, t)
    }

    #[test]
    fn word_rule() {
        let (v, t) = vocab_and_tokens(" the cat a to ");
        let words: Vec<String> = find_words(&t, &v)
            .iter()
            .map(|w| String::from_utf8(v.decode(&t[w.start..w.start + w.len])).unwrap())
            .collect();
        assert_eq!(words, ["the", "cat", "to"]);
        let (v, t) = vocab_and_tokens(" Caps ok. x2 ");
        assert!(find_words(&t, &v).is_empty());
    }

    #[test]
    fn counts_are_non_increasing_and_reference_is_zero() {
        let text = " ab abc abcd abcde abcdef ".repeat(20);
        let (v, t) = vocab_and_tokens(&text);
        let spec = ArchitectureSpec::fast_slow(2, 5, 4, v.size(), 3);
        let a = ModelParams::<f64>::init(&spec, 1).unwrap();
        let b = ModelParams::<f64>::init(&spec, 2).unwrap();
        let r = position_bpc(&[("a".into(), &a), ("b".into(), &b)], &v, &t, 8, 1).unwrap();
        assert!(r.counts.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.counts[0], 100);
        assert_eq!(r.counts[6], 0);
        assert_eq!(r.relative_loss(0, 3), 0.0);
        assert_eq!(r.rows().len(), 16);
        let rb = position_bpc(&[("a".into(), &a)], &v, &t, 8, 3).unwrap();
        assert!(rb.counts[0] <= 100 && rb.counts[0] >= 97);
    }

    #[test]
    fn no_words_is_an_error() {
        let (v, t) = vocab_and_tokens("aaaaaaaaaaaa");
        let spec = ArchitectureSpec::sequential(1, 4, v.size(), 2);
        let p = ModelParams::<f64>::init(&spec, 1).unwrap();
        assert!(matches!(position_bpc(&[("m".into(), &p)], &v, &t, 4, 1), Err(Error::Data(_))));
    }
}

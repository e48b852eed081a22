//! Perplexity on the held-out tail, single-expert ablation, and report files.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Corpus, DataRegistry};
use crate::error::{Error, Result};
use crate::model::{token_nll, MoEModel};
use crate::persistence::{sha256_hex, write_atomic};
use crate::pruning::drop_expert;

/// Evaluation windows: consecutive non-overlapping chunks of the eval tail.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub windows: Vec<Vec<u32>>,
    pub start: usize,
    pub end: usize,
    pub corpus_digest: String,
    pub digest: String,
}

impl EvalSplit {
    pub fn from_corpus(corpus: &Corpus, seq_len: usize, max_windows: Option<usize>) -> Result<Self> {
        let range = corpus.eval_range();
        let bytes = &corpus.bytes()[range.clone()];
        if bytes.len() < 2 {
            return Err(Error::CorpusTooSmall { required: 20, available: corpus.len() });
        }
        let mut windows = Vec::new();
        let mut pos = 0;
        while pos + 1 < bytes.len() && max_windows.is_none_or(|m| windows.len() < m) {
            let end = (pos + seq_len + 1).min(bytes.len());
            windows.push(bytes[pos..end].iter().map(|&b| b as u32).collect::<Vec<_>>());
            pos += seq_len;
        }
        let mut h = Vec::new();
        for w in &windows {
            h.extend(w.iter().map(|&t| t as u8));
            h.push(0xff);
        }
        Ok(EvalSplit { windows, start: range.start, end: range.end, corpus_digest: corpus.digest().to_string(), digest: sha256_hex(&h) })
    }

    pub fn token_count(&self) -> usize {
        self.windows.iter().map(|w| w.len() - 1).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub split_digest: String,
    pub tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
}

/// Per-window NLL sums in window order.
fn window_nll(model: &MoEModel, windows: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    windows
        .par_iter()
        .map(|w| {
            let pass = model.forward(&w[..w.len() - 1])?;
            token_nll(&pass.logits, &w[1..])
        })
        .collect()
}

pub fn evaluate(model: &MoEModel, split: &EvalSplit, registry: Option<&DataRegistry>) -> Result<EvalResult> {
    if let Some(r) = registry {
        r.check_disjoint(&split.corpus_digest, &(split.start..split.end))?;
    }
    if split.windows.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let per = window_nll(model, &split.windows)?;
    let mut sum = 0.0;
    for v in per.iter().flatten() {
        sum += v;
    }
    let tokens = split.token_count();
    let mean_nll = sum / tokens as f64;
    if !mean_nll.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    Ok(EvalResult { split_digest: split.digest.clone(), tokens, mean_nll, perplexity: mean_nll.exp() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub base_perplexity: f64,
    /// `n_layers × n_experts`, row-major.
    pub cells: Vec<f64>,
    pub n_layers: usize,
    pub n_experts: usize,
}

impl AblationGrid {
    pub fn get(&self, l: usize, e: usize) -> f64 {
        self.cells[l * self.n_experts + e]
    }

    pub fn max(&self) -> f64 {
        self.cells.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.cells.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,expert_original_id,perplexity,base_perplexity\n");
        for l in 0..self.n_layers {
            for e in 0..self.n_experts {
                s.push_str(&format!("{l},{e},{:?},{:?}\n", self.get(l, e), self.base_perplexity));
            }
        }
        s
    }
}

pub fn single_expert_ablation(model: &MoEModel, split: &EvalSplit) -> Result<AblationGrid> {
    let n = model.config.n_experts;
    if model.layers().iter().any(|l| l.router.n_active() != n) {
        return Err(Error::Pruning("ablation needs an unpruned model".into()));
    }
    let base = evaluate(model, split, None)?.perplexity;
    let mut cells = Vec::with_capacity(model.n_layers() * n);
    for l in 0..model.n_layers() {
        for e in 0..n {
            let mut m = model.clone();
            drop_expert(&mut m, l, e)?;
            cells.push(evaluate(&m, split, None)?.perplexity);
        }
    }
    Ok(AblationGrid { base_perplexity: base, cells, n_layers: model.n_layers(), n_experts: n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub report_version: u32,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    /// Re-hash every listed file under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let p = dir.join(&f.file);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let got = sha256_hex(&bytes);
            if got != f.sha256 {
                return Err(Error::DigestMismatch { stored: f.sha256.clone(), computed: got });
            }
        }
        Ok(())
    }
}

/// Collects named report files, then writes them with a manifest.
#[derive(Debug, Default)]
pub struct ReportSet {
    files: Vec<(String, Vec<u8>)>,
}

impl ReportSet {
    pub fn new() -> Self {
        ReportSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, contents: impl Into<Vec<u8>>) {
        let name = name.into();
        self.files.retain(|(n, _)| *n != name);
        self.files.push((name, contents.into()));
    }

    pub fn add_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) {
        self.add(name, serde_json::to_string_pretty(value).expect("report serializes") + "\n");
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.files.len());
        let mut files = self.files.clone();
        files.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, bytes) in &files {
            write_atomic(&dir.join(name), bytes)?;
            entries.push(ManifestEntry { file: name.clone(), sha256: sha256_hex(bytes) });
        }
        let manifest = Manifest { report_version: 1, files: entries };
        write_atomic(&dir.join("manifest.json"), manifest.to_json().as_bytes())?;
        Ok(manifest)
    }
}

/// Summary always present in a report directory.
pub fn summary_json(tool_version: &str, fields: serde_json::Value) -> serde_json::Value {
    json!({ "report_version": 1, "tool_version": tool_version, "summary": fields })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic_text;
    use crate::model::ModelConfig;

    fn setup() -> (MoEModel, Corpus) {
        let m = MoEModel::init(ModelConfig { d_model: 8, n_layers: 2, n_experts: 4, d_hidden: 6, seq_len: 16, seed: 4, ..Default::default() }).unwrap();
        (m, Corpus::from_bytes(synthetic_text(3000, 5)))
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let (mut m, corpus) = setup();
        for (_, t) in m.params.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        let split = EvalSplit::from_corpus(&corpus, 16, None).unwrap();
        let r = evaluate(&m, &split, None).unwrap();
        assert!((r.perplexity - 256.0).abs() < 1e-9);
    }

    #[test]
    fn evaluation_matches_naive_sum_and_repeats() {
        let (m, corpus) = setup();
        let split = EvalSplit::from_corpus(&corpus, 16, Some(5)).unwrap();
        let a = evaluate(&m, &split, None).unwrap();
        assert_eq!(a, evaluate(&m, &split, None).unwrap());
        let mut total = 0.0;
        let mut count = 0;
        for w in &split.windows {
            let logits = m.forward(&w[..w.len() - 1]).unwrap().logits;
            for t in 0..w.len() - 1 {
                let row = logits.row(t);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                total += lse - row[w[t + 1] as usize];
                count += 1;
            }
        }
        assert_eq!(count, a.tokens);
        assert!((a.mean_nll - total / count as f64).abs() < 1e-9);
        assert!(a.perplexity >= 1.0);
    }

    #[test]
    fn split_covers_the_tail_in_order() {
        let (_, corpus) = setup();
        let split = EvalSplit::from_corpus(&corpus, 16, None).unwrap();
        let tail = &corpus.bytes()[corpus.eval_range()];
        assert_eq!(split.token_count(), tail.len() - 1);
    }

    #[test]
    fn overlap_with_registered_data_is_rejected() {
        let (m, corpus) = setup();
        let split = EvalSplit::from_corpus(&corpus, 16, None).unwrap();
        let mut reg = DataRegistry::default();
        reg.register(corpus.digest(), "training", corpus.train_range());
        evaluate(&m, &split, Some(&reg)).unwrap();
        reg.register(corpus.digest(), "finetuning", split.end - 5..split.end);
        assert!(matches!(evaluate(&m, &split, Some(&reg)), Err(Error::SplitOverlap { .. })));
    }

    #[test]
    fn ablation_grid_shape() {
        let (m, corpus) = setup();
        let split = EvalSplit::from_corpus(&corpus, 16, Some(2)).unwrap();
        let g = single_expert_ablation(&m, &split).unwrap();
        assert_eq!((g.n_layers, g.n_experts, g.cells.len()), (2, 4, 8));
        assert_eq!(g.to_csv().lines().count(), 9);
    }

    #[test]
    fn reports_write_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ReportSet::new();
        r.add_json("summary.json", &summary_json("0", json!({})));
        r.add("scores.csv", "a,b\n");
        let m = r.write(dir.path()).unwrap();
        m.verify(dir.path()).unwrap();
        let again = r.write(dir.path()).unwrap();
        assert_eq!(m, again);
        std::fs::write(dir.path().join("scores.csv"), "tampered").unwrap();
        assert!(m.verify(dir.path()).is_err());
    }
}

//! Synthetic token-sequence task and its on-disk form.
//!
//! On disk a dataset is a JSON-lines manifest (one record per utterance)
//! plus a `BAT1` features tensor with the same stem and extension `bat1`,
//! holding every utterance's frames back to back.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::rnnt::LabelSeq;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub vocab: usize,
    /// Must be at least `vocab`; token `k` is the unit vector at `k - 1`.
    pub input_dim: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            tokens_min: 3,
            tokens_max: 8,
            frames_min: 2,
            frames_max: 5,
            noise: 0.3,
            vocab: 20,
            input_dim: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// `T x input_dim`.
    pub x: Tensor<f64>,
    pub labels: LabelSeq,
    /// Last frame (zero-based) of each token; strictly increasing.
    pub ends: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.x.dims()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: usize,
    pub input_dim: usize,
    pub utts: Vec<Utterance>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    frames: usize,
    vocab: usize,
    tokens: Vec<usize>,
    ends: Vec<usize>,
}

/// Random utterances: each token is held for a random number of frames as
/// a noisy copy of its one-hot prototype. Consecutive tokens differ so
/// every token boundary is visible in the input.
pub fn synth_task(seed: u64, n_utts: usize, spec: &SynthSpec) -> Result<Dataset> {
    let s = spec;
    if s.vocab < 2 || s.input_dim < s.vocab {
        return Err(Error::InvalidConfig(format!(
            "need vocab >= 2 and input_dim >= vocab, got {} and {}",
            s.vocab, s.input_dim
        )));
    }
    if s.tokens_min > s.tokens_max || s.frames_min == 0 || s.frames_min > s.frames_max {
        return Err(Error::InvalidConfig(
            "token and frame ranges must be non-empty with at least one frame per token".into(),
        ));
    }
    if !(s.noise >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise must be >= 0, got {}",
            s.noise
        )));
    }
    let mut r = rng::split(seed, rng::stream::DATA);
    let pick = |r: &mut rng::DetRng, lo: usize, hi: usize| {
        use rand::Rng;
        r.random_range(lo..=hi)
    };
    let mut utts = Vec::with_capacity(n_utts);
    for _ in 0..n_utts {
        let n_tok = pick(&mut r, s.tokens_min, s.tokens_max);
        let mut tokens = Vec::with_capacity(n_tok);
        let mut ends = Vec::with_capacity(n_tok);
        let mut data = Vec::new();
        let mut frames = 0usize;
        for _ in 0..n_tok {
            let tok = loop {
                let k = pick(&mut r, 1, s.vocab);
                if tokens.last() != Some(&k) {
                    break k;
                }
            };
            tokens.push(tok);
            let k = pick(&mut r, s.frames_min, s.frames_max);
            for _ in 0..k {
                for i in 0..s.input_dim {
                    let proto = if i + 1 == tok { 1.0 } else { 0.0 };
                    let noise = if s.noise > 0.0 {
                        s.noise * rng::normal(&mut r)
                    } else {
                        0.0
                    };
                    data.push(proto + noise);
                }
            }
            frames += k;
            ends.push(frames - 1);
        }
        if frames == 0 {
            // empty label sequence still needs one frame of input
            data.extend((0..s.input_dim).map(|_| {
                if s.noise > 0.0 {
                    s.noise * rng::normal(&mut r)
                } else {
                    0.0
                }
            }));
            frames = 1;
        }
        utts.push(Utterance {
            x: Tensor::new(vec![frames, s.input_dim], data)?,
            labels: LabelSeq::new(tokens, s.vocab)?,
            ends,
        });
    }
    Ok(Dataset {
        vocab: s.vocab,
        input_dim: s.input_dim,
        utts,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utts.is_empty()
    }

    /// Path of the features tensor paired with `manifest`.
    pub fn features_path(manifest: &Path) -> PathBuf {
        manifest.with_extension("bat1")
    }

    pub fn save(&self, manifest: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(manifest)?);
        let mut feats = Vec::new();
        for u in &self.utts {
            let rec = Record {
                frames: u.frames(),
                vocab: self.vocab,
                tokens: u.labels.tokens().to_vec(),
                ends: u.ends.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
            feats.extend_from_slice(u.x.data());
        }
        w.flush()?;
        let total = feats.len() / self.input_dim.max(1);
        Tensor::new(vec![total, self.input_dim], feats)?.write(&Self::features_path(manifest))
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in BufReader::new(std::fs::File::open(manifest)?)
            .lines()
            .enumerate()
        {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        let feats = Tensor::<f64>::read(&Self::features_path(manifest))?;
        let (total, input_dim) = match feats.dims() {
            [t, d] => (*t, *d),
            dims => {
                return Err(Error::BadDims(format!(
                    "features must be 2-D, got {dims:?}"
                )))
            }
        };
        let needed: usize = records.iter().map(|r| r.frames).sum();
        if needed != total {
            return Err(Error::DimMismatch(format!(
                "manifest lists {needed} frames, features hold {total}"
            )));
        }
        let vocab = records.first().map_or(0, |r| r.vocab);
        let mut utts = Vec::with_capacity(records.len());
        let mut offset = 0;
        for rec in records {
            if rec.vocab != vocab {
                return Err(Error::Parse("manifest records disagree on vocab".into()));
            }
            if rec.ends.len() != rec.tokens.len()
                || rec.ends.windows(2).any(|w| w[1] <= w[0])
                || rec.ends.last().is_some_and(|&e| e >= rec.frames)
            {
                return Err(Error::Parse(
                    "token end frames must be increasing and in range".into(),
                ));
            }
            let data = feats.data()[offset * input_dim..(offset + rec.frames) * input_dim].to_vec();
            offset += rec.frames;
            utts.push(Utterance {
                x: Tensor::new(vec![rec.frames, input_dim], data)?,
                labels: LabelSeq::new(rec.tokens, vocab)?,
                ends: rec.ends,
            });
        }
        Ok(Self {
            vocab,
            input_dim,
            utts,
        })
    }
}

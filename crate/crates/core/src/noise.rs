//! Effective Gram specifications for a noisy preparation device: the
//! noise-averaged Gram matrix, the entrywise envelope over a family, and the
//! JSON documents they are exchanged in.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::moment::{GramInterval, GramSpec};
use crate::protocol::GramMatrix;

const WEIGHT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSample {
    pub weight: f64,
    pub gram: GramMatrix,
}

fn common_n<'a>(grams: impl IntoIterator<Item = &'a GramMatrix>) -> Result<usize> {
    let mut it = grams.into_iter();
    let n = it.next().ok_or_else(|| invalid("empty sample list"))?.n();
    for (i, g) in it.enumerate() {
        if g.n() != n {
            return Err(Error::DimensionMismatch(format!(
                "sample {} has n = {}, expected {n}",
                i + 1,
                g.n()
            )));
        }
    }
    Ok(n)
}

/// `Ḡ = Σ_k w_k G_k`.
pub fn averaged_gram(samples: &[NoiseSample]) -> Result<GramMatrix> {
    let n = common_n(samples.iter().map(|s| &s.gram))?;
    if let Some(s) = samples.iter().find(|s| !(s.weight >= 0.0)) {
        return Err(invalid(format!("negative weight {}", s.weight)));
    }
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    if (total - 1.0).abs() > WEIGHT_TOL {
        return Err(invalid(format!("weights sum to {total}, expected 1")));
    }
    let mut acc = DMatrix::<Complex64>::zeros(n, n);
    for s in samples {
        acc += s.gram.matrix() * Complex64::new(s.weight, 0.0);
    }
    GramMatrix::new(acc)
}

/// Entrywise min/max of the real and imaginary parts.
pub fn gram_envelope(grams: &[GramMatrix]) -> Result<GramInterval> {
    let n = common_n(grams)?;
    let fold = |f: fn(Complex64) -> f64, pick: fn(f64, f64) -> f64| {
        DMatrix::from_fn(n, n, |i, j| {
            grams
                .iter()
                .map(|g| f(g.entry(i, j)))
                .reduce(pick)
                .expect("non-empty")
        })
    };
    GramInterval::new(
        fold(|z| z.re, f64::min),
        fold(|z| z.re, f64::max),
        fold(|z| z.im, f64::min),
        fold(|z| z.im, f64::max),
    )
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GramDoc {
    n: usize,
    entries: Vec<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntervalDoc {
    n: usize,
    re_lo: Vec<Vec<f64>>,
    re_hi: Vec<Vec<f64>>,
    im_lo: Vec<Vec<f64>>,
    im_hi: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleDoc {
    weight: f64,
    gram: GramDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplesDoc {
    samples: Vec<SampleDoc>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecDoc {
    Exact(GramDoc),
    Interval(IntervalDoc),
}

fn parse_err(e: serde_json::Error) -> Error {
    Error::Parse(e.to_string())
}

fn table<T: Copy>(n: usize, rows: &[Vec<T>], what: &str) -> Result<DMatrix<T>>
where
    T: nalgebra::Scalar,
{
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch(format!("{what} must be {n}x{n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn rows<T: Copy>(m: &DMatrix<T>) -> Vec<Vec<T>>
where
    T: nalgebra::Scalar,
{
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl GramDoc {
    fn from_gram(g: &GramMatrix) -> Self {
        Self {
            n: g.n(),
            entries: rows(&g.matrix().map(|z| [z.re, z.im])),
        }
    }

    fn into_gram(self) -> Result<GramMatrix> {
        let m = table(self.n, &self.entries, "entries")?;
        GramMatrix::new(m.map(|[re, im]| Complex64::new(re, im)))
    }
}

impl IntervalDoc {
    fn into_interval(self) -> Result<GramInterval> {
        GramInterval::new(
            table(self.n, &self.re_lo, "re_lo")?,
            table(self.n, &self.re_hi, "re_hi")?,
            table(self.n, &self.im_lo, "im_lo")?,
            table(self.n, &self.im_hi, "im_hi")?,
        )
    }
}

pub fn gram_to_json(gram: &GramMatrix) -> String {
    serde_json::to_string_pretty(&GramDoc::from_gram(gram)).expect("serializable")
}

pub fn gram_from_json(text: &str) -> Result<GramMatrix> {
    serde_json::from_str::<GramDoc>(text).map_err(parse_err)?.into_gram()
}

pub fn interval_to_json(iv: &GramInterval) -> String {
    let doc = IntervalDoc {
        n: iv.n(),
        re_lo: rows(&iv.re_lo),
        re_hi: rows(&iv.re_hi),
        im_lo: rows(&iv.im_lo),
        im_hi: rows(&iv.im_hi),
    };
    serde_json::to_string_pretty(&doc).expect("serializable")
}

pub fn interval_from_json(text: &str) -> Result<GramInterval> {
    serde_json::from_str::<IntervalDoc>(text)
        .map_err(parse_err)?
        .into_interval()
}

/// Accepts either the exact or the interval document.
pub fn gram_spec_from_json(text: &str) -> Result<GramSpec> {
    match serde_json::from_str::<SpecDoc>(text).map_err(|_| {
        Error::Parse("expected a gram document (n, entries) or an interval document (n, re_lo, re_hi, im_lo, im_hi)".into())
    })? {
        SpecDoc::Exact(d) => Ok(GramSpec::Exact(d.into_gram()?)),
        SpecDoc::Interval(d) => Ok(GramSpec::Interval(d.into_interval()?)),
    }
}

pub fn gram_spec_to_json(spec: &GramSpec) -> String {
    match spec {
        GramSpec::Exact(g) => gram_to_json(g),
        GramSpec::Interval(iv) => interval_to_json(iv),
    }
}

pub fn samples_to_json(samples: &[NoiseSample]) -> String {
    let doc = SamplesDoc {
        samples: samples
            .iter()
            .map(|s| SampleDoc {
                weight: s.weight,
                gram: GramDoc::from_gram(&s.gram),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("serializable")
}

pub fn samples_from_json(text: &str) -> Result<Vec<NoiseSample>> {
    let doc: SamplesDoc = serde_json::from_str(text).map_err(parse_err)?;
    doc.samples
        .into_iter()
        .map(|s| {
            Ok(NoiseSample {
                weight: s.weight,
                gram: s.gram.into_gram()?,
            })
        })
        .collect()
}

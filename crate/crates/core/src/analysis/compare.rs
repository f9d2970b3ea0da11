use statrs::distribution::{ContinuousCDF, Gamma, Normal};

use crate::error::{Error, Result};

/// Fewest samples accepted by [`compare_histogram`].
pub const MIN_SAMPLES: usize = 1000;
const MAX_BINS: usize = 100_000;

/// Distribution the samples are compared against.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    Gamma {
        shape: f64,
        rate: f64,
    },
    Normal {
        mean: f64,
        sd: f64,
    },
    PointMass(f64),
    /// Density tabulated on increasing nodes, linearly interpolated and
    /// renormalized to unit mass.
    Grid {
        nodes: Vec<f64>,
        density: Vec<f64>,
    },
    /// Another sample (two-sample comparison).
    Empirical(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramComparison {
    pub samples: usize,
    /// Kolmogorov-Smirnov distance.
    pub ks: f64,
    /// Total-variation distance on shared Freedman-Diaconis bins.
    pub tv: f64,
    pub bin_width: f64,
    pub bins: usize,
    /// Sample mean minus reference mean.
    pub mean_diff: f64,
    /// Sample variance minus reference variance.
    pub var_diff: f64,
}

/// Piecewise-linear density with its exact cumulative integral.
struct GridCdf<'a> {
    nodes: &'a [f64],
    density: &'a [f64],
    cumulative: Vec<f64>,
}

impl<'a> GridCdf<'a> {
    fn new(nodes: &'a [f64], density: &'a [f64]) -> Result<Self> {
        if nodes.len() < 2
            || nodes.len() != density.len()
            || nodes.windows(2).any(|w| !(w[0] < w[1]))
            || density.iter().any(|d| !(*d >= 0.0))
        {
            return Err(Error::InvalidInput(
                "grid reference needs increasing nodes and non-negative density".into(),
            ));
        }
        let mut cumulative = vec![0.0; nodes.len()];
        for i in 1..nodes.len() {
            cumulative[i] =
                cumulative[i - 1] + 0.5 * (density[i] + density[i - 1]) * (nodes[i] - nodes[i - 1]);
        }
        let total = cumulative[nodes.len() - 1];
        if !(total > 0.0) {
            return Err(Error::InvalidInput("grid reference has no mass".into()));
        }
        Ok(Self {
            nodes,
            density,
            cumulative,
        })
    }

    fn total(&self) -> f64 {
        self.cumulative[self.cumulative.len() - 1]
    }

    fn cdf(&self, x: f64) -> f64 {
        let n = self.nodes.len();
        if x <= self.nodes[0] {
            return 0.0;
        }
        if x >= self.nodes[n - 1] {
            return 1.0;
        }
        let i = self.nodes.partition_point(|v| *v <= x) - 1;
        let (x0, x1) = (self.nodes[i], self.nodes[i + 1]);
        let (d0, d1) = (self.density[i], self.density[i + 1]);
        let s = x - x0;
        let slope = (d1 - d0) / (x1 - x0);
        (self.cumulative[i] + d0 * s + 0.5 * slope * s * s) / self.total()
    }

    fn mean_var(&self) -> (f64, f64) {
        // moments of the piecewise-linear density, segment by segment
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..self.nodes.len() - 1 {
            let (a, b) = (self.nodes[i], self.nodes[i + 1]);
            let (da, db) = (self.density[i], self.density[i + 1]);
            let h = b - a;
            // ∫ x p(x) and ∫ x² p(x) for p linear on [a, b]
            m1 += h / 6.0 * (da * (2.0 * a + b) + db * (a + 2.0 * b));
            m2 += h / 12.0
                * (da * (3.0 * a * a + 2.0 * a * b + b * b) + db * (a * a + 2.0 * a * b + 3.0 * b * b));
        }
        let t = self.total();
        let mean = m1 / t;
        (mean, m2 / t - mean * mean)
    }
}

enum Prepared<'a> {
    Gamma(Gamma, f64, f64),
    Normal(Normal, f64, f64),
    PointMass(f64),
    Grid(GridCdf<'a>),
}

impl Prepared<'_> {
    fn cdf(&self, x: f64) -> f64 {
        match self {
            Prepared::Gamma(g, ..) => g.cdf(x.max(0.0)),
            Prepared::Normal(n, ..) => n.cdf(x),
            Prepared::PointMass(c) => {
                if x >= *c {
                    1.0
                } else {
                    0.0
                }
            }
            Prepared::Grid(g) => g.cdf(x),
        }
    }

    /// Mass on the closed interval `[lo, hi]`.
    fn mass(&self, lo: f64, hi: f64) -> f64 {
        match self {
            Prepared::PointMass(c) => {
                if (lo..=hi).contains(c) {
                    1.0
                } else {
                    0.0
                }
            }
            _ => self.cdf(hi) - self.cdf(lo),
        }
    }

    fn mean_var(&self) -> (f64, f64) {
        match self {
            Prepared::Gamma(_, k, r) => (k / r, k / (r * r)),
            Prepared::Normal(_, mean, sd) => (*mean, sd * sd),
            Prepared::PointMass(c) => (*c, 0.0),
            Prepared::Grid(g) => g.mean_var(),
        }
    }
}

fn prepare(reference: &Reference) -> Result<Prepared<'_>> {
    Ok(match reference {
        Reference::Gamma { shape, rate } => Prepared::Gamma(
            Gamma::new(*shape, *rate).map_err(|e| Error::InvalidInput(e.to_string()))?,
            *shape,
            *rate,
        ),
        Reference::Normal { mean, sd } => Prepared::Normal(
            Normal::new(*mean, *sd).map_err(|e| Error::InvalidInput(e.to_string()))?,
            *mean,
            *sd,
        ),
        Reference::PointMass(c) => Prepared::PointMass(*c),
        Reference::Grid { nodes, density } => Prepared::Grid(GridCdf::new(nodes, density)?),
        Reference::Empirical(_) => unreachable!("empirical references are handled separately"),
    })
}

fn sorted(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("samples must be finite".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Freedman-Diaconis bin edges covering `[lo, hi]`.
fn fd_edges(sorted: &[f64], lo: f64, hi: f64) -> (f64, Vec<f64>) {
    let iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
    let n = sorted.len() as f64;
    let width = 2.0 * iqr / n.cbrt();
    if !(width > 0.0) || hi <= lo {
        return (0.0, vec![lo, hi]);
    }
    let bins = (((hi - lo) / width).ceil() as usize).clamp(1, MAX_BINS);
    let width = (hi - lo) / bins as f64;
    (width, (0..=bins).map(|i| lo + width * i as f64).collect())
}

/// Bin counts; the last bin is closed on the right.
fn bin_counts(sorted: &[f64], edges: &[f64]) -> Vec<f64> {
    let bins = edges.len() - 1;
    let mut counts = vec![0.0; bins];
    let (lo, hi) = (edges[0], edges[bins]);
    let width = (hi - lo) / bins as f64;
    for &x in sorted {
        if x < lo || x > hi {
            continue;
        }
        let b = if width > 0.0 {
            (((x - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1.0;
    }
    counts
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// KS distance, total variation on Freedman-Diaconis bins, and moment
/// differences between `samples` and `reference`.
pub fn compare_histogram(samples: &[f64], reference: &Reference) -> Result<HistogramComparison> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_SAMPLES,
            got: samples.len(),
        });
    }
    let xs = sorted(samples)?;
    let n = xs.len() as f64;
    let (mean, var) = super::mean_variance(&xs);
    if let Reference::Empirical(other) = reference {
        let ys = sorted(other)?;
        if ys.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        let lo = xs[0].min(ys[0]);
        let hi = xs[xs.len() - 1].max(ys[ys.len() - 1]);
        let (bin_width, edges) = fd_edges(&xs, lo, hi);
        let (ca, cb) = (bin_counts(&xs, &edges), bin_counts(&ys, &edges));
        let m = ys.len() as f64;
        let tv = 0.5
            * ca.iter()
                .zip(&cb)
                .map(|(a, b)| (a / n - b / m).abs())
                .sum::<f64>();
        let (mean_ref, var_ref) = if ys.len() > 1 {
            super::mean_variance(&ys)
        } else {
            (ys[0], 0.0)
        };
        return Ok(HistogramComparison {
            samples: xs.len(),
            ks: ks_two_sample(&xs, &ys)?,
            tv,
            bin_width,
            bins: edges.len() - 1,
            mean_diff: mean - mean_ref,
            var_diff: var - var_ref,
        });
    }
    let prepared = prepare(reference)?;
    let mut ks = 0.0f64;
    let mut i = 0;
    while i < xs.len() {
        // step over ties so the empirical CDF jumps once per distinct value
        let x = xs[i];
        let mut k = i;
        while k < xs.len() && xs[k] == x {
            k += 1;
        }
        let f = prepared.cdf(x);
        let f_left = match &prepared {
            Prepared::PointMass(c) if *c == x => 0.0,
            _ => f,
        };
        ks = ks
            .max((f - k as f64 / n).abs())
            .max((f_left - i as f64 / n).abs());
        i = k;
    }
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    let (bin_width, edges) = fd_edges(&xs, lo, hi);
    let counts = bin_counts(&xs, &edges);
    let mut covered = 0.0;
    let mut tv = 0.0;
    for (b, c) in counts.iter().enumerate() {
        let p = if edges.len() == 2 {
            prepared.mass(edges[0], edges[1])
        } else {
            prepared.cdf(edges[b + 1]) - prepared.cdf(edges[b])
        };
        covered += p;
        tv += (c / n - p).abs();
    }
    tv = 0.5 * (tv + (1.0 - covered).max(0.0));
    let (mean_ref, var_ref) = prepared.mean_var();
    Ok(HistogramComparison {
        samples: xs.len(),
        ks,
        tv,
        bin_width,
        bins: edges.len() - 1,
        mean_diff: mean - mean_ref,
        var_diff: var - var_ref,
    })
}

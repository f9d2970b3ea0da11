use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::RngCore;

use super::{
    categorical, log_sum_exp, multinomial, softmax, weighted_covariance, ExponentialFamily, Face, Fit,
    HullLocation, State, StateSpace, HULL_SLACK,
};
use crate::error::{check_finite, Error, Result};

/// Mean-field Ising model
/// `f(s) ∝ exp(θ1 Σ_i σ_i + θ2/N Σ_{i<j} σ_i σ_j)` on `N` spins.
///
/// Both statistics depend on the configuration only through the
/// magnetization, so states are magnetization sectors `k = 0..=N` (the
/// number of down spins) with `φ1 = N - 2k`, `φ2 = (φ1² - N) / (2N)` and
/// multiplicity `C(N, k)`. With `include_coupling = false` the coupling is
/// pinned to zero and only `φ1` is a statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct IsingMeanField {
    n: u32,
    include_coupling: bool,
    log_multiplicity: Vec<f64>,
    phi1: Vec<f64>,
    phi2: Vec<f64>,
}

impl IsingMeanField {
    pub fn new(n: u32, include_coupling: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("Ising model needs N >= 1".into()));
        }
        if include_coupling && n < 2 {
            return Err(Error::InvalidInput(
                "the coupling statistic is constant for N = 1".into(),
            ));
        }
        let nf = n as f64;
        let mut log_multiplicity = Vec::with_capacity(n as usize + 1);
        let mut acc = 0.0;
        log_multiplicity.push(0.0);
        for k in 1..=n {
            acc += ((n - k + 1) as f64).ln() - (k as f64).ln();
            log_multiplicity.push(acc);
        }
        let phi1: Vec<f64> = (0..=n).map(|k| nf - 2.0 * k as f64).collect();
        let phi2 = phi1.iter().map(|x| (x * x - nf) / (2.0 * nf)).collect();
        Ok(Self {
            n,
            include_coupling,
            log_multiplicity,
            phi1,
            phi2,
        })
    }

    pub fn spins(&self) -> u32 {
        self.n
    }

    pub fn include_coupling(&self) -> bool {
        self.include_coupling
    }

    /// Sector holding magnetization `phi1`, if `phi1` is attainable.
    pub fn sector_of(&self, phi1: i64) -> Option<State> {
        let n = self.n as i64;
        if phi1.abs() > n || (n - phi1) % 2 != 0 {
            return None;
        }
        Some(((n - phi1) / 2) as State)
    }

    pub fn phi1_of(&self, sector: State) -> f64 {
        self.phi1[sector as usize]
    }

    /// `log C(N, k)` per sector.
    pub fn log_multiplicities(&self) -> &[f64] {
        &self.log_multiplicity
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::InvalidParameter(format!(
                "Ising expects {} parameters, got {}",
                self.dim(),
                theta.len()
            )));
        }
        check_finite(theta)
    }

    fn stats_of(&self, k: usize) -> Vec<f64> {
        if self.include_coupling {
            vec![self.phi1[k], self.phi2[k]]
        } else {
            vec![self.phi1[k]]
        }
    }

    fn sector_log_weights(&self, theta: &[f64]) -> Vec<f64> {
        let t2 = if self.include_coupling { theta[1] } else { 0.0 };
        (0..=self.n as usize)
            .map(|k| self.log_multiplicity[k] + theta[0] * self.phi1[k] + t2 * self.phi2[k])
            .collect()
    }

    /// Exact distribution over magnetization sectors.
    pub fn sector_probs(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        Ok(softmax(&self.sector_log_weights(theta)))
    }

    fn fit_sector_probs(&self, fit: &Fit) -> Result<Vec<f64>> {
        let mut probs = vec![0.0; self.n as usize + 1];
        match fit {
            Fit::Interior(theta) => return self.sector_probs(theta),
            Fit::Boundary(Face::Vertex(k)) => {
                *probs
                    .get_mut(*k as usize)
                    .ok_or_else(|| Error::InvalidParameter(format!("sector {k} out of range")))? = 1.0
            }
            Fit::Boundary(Face::Edge { a, b, p_b }) => {
                if *a as usize > self.n as usize || *b as usize > self.n as usize {
                    return Err(Error::InvalidParameter("edge sector out of range".into()));
                }
                probs[*a as usize] += 1.0 - p_b;
                probs[*b as usize] += p_b;
            }
        }
        Ok(probs)
    }

    /// Draws `n` full spin configurations (entries ±1): a sector from the
    /// exact sector law, then a uniform arrangement of its down spins.
    pub fn sample_configurations(
        &self,
        theta: &[f64],
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<i8>>> {
        let sectors = self.sample(theta, n, rng)?;
        let spins = self.n as usize;
        Ok(sectors
            .into_iter()
            .map(|k| {
                let mut config = vec![1i8; spins];
                for s in config.iter_mut().take(k as usize) {
                    *s = -1;
                }
                config.shuffle(rng);
                config
            })
            .collect())
    }

    pub(super) fn int_stats(&self, sector: State) -> Vec<i64> {
        let x = self.n as i64 - 2 * sector as i64;
        if self.include_coupling {
            vec![x, x * x]
        } else {
            vec![x]
        }
    }

    pub(super) fn mean_stats(&self, sums: &[i64], n: u64) -> Vec<f64> {
        let nf = n as f64;
        let spins = self.n as f64;
        let mut out = vec![sums[0] as f64 / nf];
        if self.include_coupling {
            out.push((sums[1] as f64 - nf * spins) / (2.0 * spins * nf));
        }
        out
    }

    pub(super) fn sample_sums(&self, fit: &Fit, n: u64, rng: &mut dyn RngCore) -> Result<Vec<i64>> {
        let probs = self.fit_sector_probs(fit)?;
        let counts = multinomial(n, &probs, rng)?;
        let mut sums = vec![0i64; self.dim()];
        for (k, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            for (s, v) in sums.iter_mut().zip(self.int_stats(k as State)) {
                *s += v * c as i64;
            }
        }
        Ok(sums)
    }

    /// Classifies averaged statistics against the convex hull of the sector
    /// points. In the coupled model the hull is the polygon through the
    /// points `(x, (x² - N)/(2N))`: lower edges join adjacent sectors, the top
    /// edge joins the two fully polarized sectors.
    pub(super) fn locate(&self, phi: &[f64]) -> HullLocation {
        let nf = self.n as f64;
        let x = phi[0];
        if x.abs() > nf + HULL_SLACK {
            return HullLocation::Outside(format!("|phi1| = {} exceeds N = {}", x.abs(), nf));
        }
        let x = x.clamp(-nf, nf);
        let nearest_vertex = |x: f64| -> Option<State> {
            let i = ((x + nf) / 2.0).round();
            let xi = -nf + 2.0 * i;
            ((x - xi).abs() <= HULL_SLACK).then(|| (self.n as i64 - i as i64) as State)
        };
        if !self.include_coupling {
            if x >= nf - HULL_SLACK {
                return HullLocation::OnFace(Face::Vertex(0));
            }
            if x <= -nf + HULL_SLACK {
                return HullLocation::OnFace(Face::Vertex(self.n as State));
            }
            return HullLocation::Interior;
        }
        let y = phi[1];
        let top = (nf - 1.0) / 2.0;
        // lower chord between up-spin counts i and i + 1
        let i = (((x + nf) / 2.0).floor() as i64).clamp(0, self.n as i64 - 1);
        let xa = -nf + 2.0 * i as f64;
        let g = |v: f64| (v * v - nf) / (2.0 * nf);
        let t = (x - xa) / 2.0;
        let lower = (1.0 - t) * g(xa) + t * g(xa + 2.0);
        if y < lower - HULL_SLACK || y > top + HULL_SLACK {
            return HullLocation::Outside(format!("phi2 = {y} outside [{lower}, {top}] at phi1 = {x}"));
        }
        let on_lower = y <= lower + HULL_SLACK;
        let on_top = y >= top - HULL_SLACK;
        if on_lower || on_top {
            if let Some(k) = nearest_vertex(x) {
                // interior lattice points only touch the lower boundary
                if on_lower || k == 0 || k == self.n as State {
                    return HullLocation::OnFace(Face::Vertex(k));
                }
            }
            if on_lower {
                let a = (self.n as i64 - i) as State;
                return HullLocation::OnFace(Face::Edge {
                    a,
                    b: a - 1,
                    p_b: t.clamp(0.0, 1.0),
                });
            }
            return HullLocation::OnFace(Face::Edge {
                a: self.n as State,
                b: 0,
                p_b: ((x + nf) / (2.0 * nf)).clamp(0.0, 1.0),
            });
        }
        HullLocation::Interior
    }

    pub(super) fn face_theta(&self, face: &Face) -> Vec<f64> {
        let inf = f64::INFINITY;
        match face {
            Face::Vertex(k) => {
                let x = self.phi1[*k as usize];
                let signed = if x > 0.0 {
                    inf
                } else if x < 0.0 {
                    -inf
                } else {
                    0.0
                };
                if !self.include_coupling {
                    vec![signed]
                } else if *k == 0 || *k == self.n as State {
                    vec![signed, 0.0]
                } else {
                    // θ2 → -∞ with θ1/θ2 → -φ*/N
                    vec![signed, -inf]
                }
            }
            Face::Edge { .. } => vec![f64::NAN; self.dim()],
        }
    }

    pub(super) fn face_label(&self, face: &Face) -> String {
        match face {
            Face::Vertex(0) => "all-up".to_string(),
            Face::Vertex(k) if *k == self.n as State => "all-down".to_string(),
            Face::Vertex(k) => format!("phi1={}", self.phi1[*k as usize]),
            Face::Edge { a, b, .. } => {
                format!("edge:phi1={}|{}", self.phi1[*a as usize], self.phi1[*b as usize])
            }
        }
    }

    /// Shannon entropy (over spin configurations) of a face distribution.
    pub fn face_entropy(&self, face: &Face) -> f64 {
        match face {
            Face::Vertex(k) => self.log_multiplicity[*k as usize],
            Face::Edge { a, b, p_b } => {
                let pa = 1.0 - p_b;
                let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
                h(pa)
                    + h(*p_b)
                    + pa * self.log_multiplicity[*a as usize]
                    + p_b * self.log_multiplicity[*b as usize]
            }
        }
    }

    /// Vertices of the hull polygon in counter-clockwise order, starting
    /// from the all-down sector.
    pub fn hull_vertices(&self) -> Vec<[f64; 2]> {
        (0..=self.n as usize)
            .rev()
            .map(|k| [self.phi1[k], self.phi2[k]])
            .collect()
    }
}

impl ExponentialFamily for IsingMeanField {
    fn dim(&self) -> usize {
        if self.include_coupling {
            2
        } else {
            1
        }
    }

    fn state_space(&self) -> StateSpace {
        StateSpace::Finite(self.n as usize + 1)
    }

    fn suff_stats(&self, state: State) -> Vec<f64> {
        self.stats_of(state as usize)
    }

    fn log_base_measure(&self, state: State) -> f64 {
        self.log_multiplicity[state as usize]
    }

    fn log_partition(&self, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        Ok(log_sum_exp(&self.sector_log_weights(theta)))
    }

    fn moments(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let probs = self.sector_probs(theta)?;
        let mut m = vec![0.0; self.dim()];
        for (k, p) in probs.iter().enumerate() {
            m[0] += p * self.phi1[k];
            if self.include_coupling {
                m[1] += p * self.phi2[k];
            }
        }
        Ok(m)
    }

    fn fim(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let probs = self.sector_probs(theta)?;
        let stats: Vec<Vec<f64>> = (0..probs.len()).map(|k| self.stats_of(k)).collect();
        Ok(weighted_covariance(&probs, &stats).1)
    }

    fn sample(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<State>> {
        if n == 0 {
            return Err(Error::InvalidInput("sample count must be at least 1".into()));
        }
        categorical(&self.sector_probs(theta)?, n, rng)
    }

    fn stat_bounds(&self) -> Option<Vec<(f64, f64)>> {
        let nf = self.n as f64;
        let mut b = vec![(-nf, nf)];
        if self.include_coupling {
            // minimum of (x² - N)/(2N) over attainable x
            let min = self.phi2.iter().cloned().fold(f64::INFINITY, f64::min);
            b.push((min, (nf - 1.0) / 2.0));
        }
        Some(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn single_spin_log_partition() {
        let m = IsingMeanField::new(1, false).unwrap();
        assert!((m.log_partition(&[0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn multiplicities_sum_to_two_pow_n() {
        let m = IsingMeanField::new(12, true).unwrap();
        let total: f64 = m.log_multiplicities().iter().map(|l| l.exp()).sum();
        assert!((total - 4096.0).abs() < 1e-9);
    }

    #[test]
    fn coupling_statistic_is_function_of_magnetization() {
        let m = IsingMeanField::new(7, true).unwrap();
        for k in 0..=7 {
            let phi = m.suff_stats(k);
            assert!((phi[1] - (phi[0] * phi[0] - 7.0) / 14.0).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_field_has_zero_magnetization() {
        let m = IsingMeanField::new(9, true).unwrap();
        assert!(m.moments(&[0.0, 0.0]).unwrap()[0].abs() < 1e-14);
    }

    #[test]
    fn pinned_fim_is_independent_spin_variance() {
        let m = IsingMeanField::new(10, false).unwrap();
        for t in [-2.0, -0.3, 0.0, 0.7, 1.5] {
            let j = m.fim(&[t]).unwrap()[(0, 0)];
            let expected = 10.0 * (1.0 - f64::tanh(t).powi(2));
            assert!((j - expected).abs() < 1e-12, "{j} vs {expected}");
        }
    }

    #[test]
    fn saturated_field_samples_all_up() {
        let m = IsingMeanField::new(10, false).unwrap();
        let mut rng = stream(3, 0, 0);
        let s = m.sample(&[30.0], 100, &mut rng).unwrap();
        assert!(s.iter().all(|&k| m.suff_stats(k)[0] == 10.0));
    }

    #[test]
    fn rejects_bad_parameters() {
        let m = IsingMeanField::new(4, true).unwrap();
        assert!(matches!(
            m.log_partition(&[f64::NAN, 0.0]),
            Err(Error::InvalidParameter(_))
        ));
        assert!(m.log_partition(&[0.0]).is_err());
        assert!(IsingMeanField::new(1, true).is_err());
    }

    #[test]
    fn configurations_match_sector() {
        let m = IsingMeanField::new(6, false).unwrap();
        let mut rng = stream(4, 0, 0);
        for c in m.sample_configurations(&[0.2], 50, &mut rng).unwrap() {
            assert_eq!(c.len(), 6);
            assert!(c.iter().all(|&s| s == 1 || s == -1));
        }
    }

    #[test]
    fn hull_classification() {
        let m = IsingMeanField::new(4, true).unwrap();
        // all samples in sector 1 (φ1 = 2)
        let v = m.suff_stats(1);
        assert_eq!(m.locate(&v), HullLocation::OnFace(Face::Vertex(1)));
        // half in sector 1, half in sector 2: lower edge
        let (a, b) = (m.suff_stats(2), m.suff_stats(1));
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        match m.locate(&mid) {
            HullLocation::OnFace(Face::Edge { a, b, p_b }) => {
                assert_eq!((a, b), (2, 1));
                assert!((p_b - 0.5).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        // mixture of both polarized sectors: top edge
        let top = [1.0, 1.5];
        assert!(matches!(
            m.locate(&top),
            HullLocation::OnFace(Face::Edge { a: 4, b: 0, .. })
        ));
        // below the lower chord
        assert!(matches!(m.locate(&[1.0, -0.5]), HullLocation::Outside(_)));
        assert_eq!(m.locate(&[0.5, 0.0]), HullLocation::Interior);
    }
}

//! Property suites run by the `selftest` command: Hungarian against brute
//! force, tape against finite differences, metric oracles and refinement
//! identities. Each check is named so that a failure points at the broken
//! property.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::{brute_force_min_cost, hungarian, Assignment, CostMatrix, GroundTruth};
use crate::error::Result;
use crate::geometry::{BoxOffset, NormalizedBox};
use crate::metrics::{
    ap_eval, dataset_fis, fcs, fis, fos, is_metric, AssignmentRecord, DetectionResult, EpochLog, UNMATCHED,
};
use crate::numeric::{gradients_agree, GRAD_ABS_TOL, GRAD_REL_TOL};
use crate::refinement::{
    fd_sensitivities, gradient_flow, summand_weights, tape_sensitivities, GradFlowMatrix, RefineScheme,
    RefinementTrace, Sensitivities,
};

pub type Solver = fn(&CostMatrix) -> Result<Assignment>;

#[derive(Debug, Clone, Copy)]
pub struct SelftestOptions {
    pub solver: Solver,
    pub seed: u64,
    pub hungarian_trials: usize,
    pub metric_trials: usize,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            solver: hungarian,
            seed: 0,
            hungarian_trials: 1000,
            metric_trials: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub property: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, property: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.property == property)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.property.len()).max().unwrap_or(8);
        writeln!(f, "{:<22} {:<width$} result  detail", "suite", "property")?;
        for c in &self.checks {
            let r = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{:<22} {:<width$} {r}    {}", c.suite, c.property, c.detail)?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {failed} failed, {:.2}s", self.checks.len(), self.seconds)
    }
}

struct Suite {
    name: &'static str,
    checks: Vec<Check>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self { name, checks: vec![] }
    }

    fn record(&mut self, property: &'static str, outcome: std::result::Result<String, String>) {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.checks.push(Check {
            suite: self.name,
            property,
            passed,
            detail,
        });
    }
}

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn run(opts: &SelftestOptions) -> SelftestReport {
    let start = Instant::now();
    let mut checks = vec![];
    checks.extend(hungarian_suite(opts));
    checks.extend(gradient_suite(opts.seed));
    checks.extend(metric_suite(opts));
    checks.extend(refinement_suite());
    SelftestReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Integer-valued costs so that optimal totals compare exactly.
pub fn random_cost_matrix(rng: &mut impl Rng) -> CostMatrix {
    let rows = rng.gen_range(1..=6);
    let cols = rng.gen_range(1..=6);
    let data = (0..rows * cols).map(|_| rng.gen_range(0..50) as f64).collect();
    CostMatrix::new(rows, cols, data).expect("shape matches data")
}

fn feasible(cost: &CostMatrix, a: &Assignment) -> std::result::Result<(), String> {
    let k = cost.rows().min(cost.cols());
    ensure(a.pairs.len() == k, || format!("{} pairs for a {}x{} matrix", a.pairs.len(), cost.rows(), cost.cols()))?;
    let mut rows = vec![false; cost.rows()];
    let mut cols = vec![false; cost.cols()];
    for &(r, c) in &a.pairs {
        ensure(r < cost.rows() && c < cost.cols(), || format!("pair ({r},{c}) out of range"))?;
        ensure(!rows[r] && !cols[c], || format!("pair ({r},{c}) reuses a row or column"))?;
        rows[r] = true;
        cols[c] = true;
    }
    let total: f64 = a.pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    ensure(total == a.total_cost, || format!("reported total {} but pairs sum to {total}", a.total_cost))
}

fn hungarian_suite(opts: &SelftestOptions) -> Vec<Check> {
    let mut s = Suite::new("hungarian");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4a5e);
    let mut feasibility: Outcome = Ok(String::new());
    let mut optimality: Outcome = Ok(String::new());
    for trial in 0..opts.hungarian_trials {
        let cost = random_cost_matrix(&mut rng);
        let a = match (opts.solver)(&cost) {
            Ok(a) => a,
            Err(e) => {
                feasibility = Err(format!("trial {trial}: solver error {e}"));
                break;
            }
        };
        if let Err(e) = feasible(&cost, &a) {
            if feasibility.is_ok() {
                feasibility = Err(format!("trial {trial}: {e}"));
            }
        }
        let best = brute_force_min_cost(&cost);
        let total: f64 = a.pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
        if total != best && optimality.is_ok() {
            optimality = Err(format!("trial {trial}: {}x{} total {total} vs optimum {best}", cost.rows(), cost.cols()));
        }
    }
    let n = opts.hungarian_trials;
    s.record("hungarian_feasibility", feasibility.map(|_| format!("{n} matrices")));
    s.record("hungarian_optimality", optimality.map(|_| format!("{n} matrices up to 6x6")));
    s.checks
}

/// Random detached references and offsets for an `num_layers`-layer trace.
pub fn random_trace_point(rng: &mut impl Rng, num_layers: usize) -> (Vec<NormalizedBox>, Vec<BoxOffset>) {
    let offs: Vec<BoxOffset> = (0..num_layers)
        .map(|_| BoxOffset::from_array(std::array::from_fn(|_| rng.gen_range(-0.5..0.5))))
        .collect();
    let r0 = NormalizedBox::new(
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.1..0.5),
    )
    .expect("sampled inside the unit square");
    let t = RefinementTrace::build(r0, &offs, RefineScheme::Lfo).expect("finite offsets");
    (t.detached_refs, offs)
}

fn flat(s: &Sensitivities) -> Vec<f64> {
    s.iter().flatten().flatten().copied().collect()
}

/// Tape and finite-difference sensitivities for one scheme, plus whether
/// both agree with each other and with the symbolic reach pattern.
pub fn check_gradient_reach(
    scheme: RefineScheme,
    num_layers: usize,
    rng: &mut impl Rng,
) -> std::result::Result<GradFlowMatrix, String> {
    let (refs, offs) = random_trace_point(rng, num_layers);
    let tape = tape_sensitivities(scheme, &refs, &offs).map_err(|e| e.to_string())?;
    let fd = fd_sensitivities(scheme, &refs, &offs).map_err(|e| e.to_string())?;
    ensure(gradients_agree(&flat(&tape), &flat(&fd), GRAD_ABS_TOL, GRAD_REL_TOL), || {
        format!("{scheme} L={num_layers}: tape and finite differences disagree")
    })?;
    let symbolic = gradient_flow(scheme, num_layers).map_err(|e| e.to_string())?;
    let from_tape = GradFlowMatrix::from_sensitivities(&tape, 1e-12);
    let from_fd = GradFlowMatrix::from_sensitivities(&fd, 1e-9);
    ensure(from_tape == symbolic, || format!("{scheme} L={num_layers}: tape reach differs from symbolic"))?;
    ensure(from_fd == symbolic, || format!("{scheme} L={num_layers}: finite-difference reach differs"))?;
    Ok(symbolic)
}

fn gradient_suite(seed: u64) -> Vec<Check> {
    let mut s = Suite::new("gradient_check");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9ad);
    let mut outcome: Outcome = Ok(String::new());
    let mut cells = 0;
    'outer: for num_layers in [3, 6] {
        for scheme in RefineScheme::all() {
            match check_gradient_reach(scheme, num_layers, &mut rng) {
                Ok(m) => cells += m.count_true(),
                Err(e) => {
                    outcome = Err(e);
                    break 'outer;
                }
            }
        }
    }
    s.record("gradient_reach", outcome.map(|_| format!("8 schemes x L in {{3,6}}, {cells} reachable cells")));
    s.checks
}

fn rec(image_id: usize, v: &[i64], t: &[i64]) -> AssignmentRecord {
    AssignmentRecord {
        epoch: 0,
        image_id,
        v: v.to_vec(),
        t: t.to_vec(),
    }
}

fn exact<T: PartialEq + fmt::Debug>(name: &str, got: Result<T>, want: T) -> std::result::Result<(), String> {
    match got {
        Ok(g) if g == want => Ok(()),
        Ok(g) => Err(format!("{name}: got {g:?}, expected {want:?}")),
        Err(e) => Err(format!("{name}: {e}")),
    }
}

fn worked_examples() -> Outcome {
    let prev = rec(0, &[0, -1, 1], &[3, -1, 5]);
    let cur = rec(0, &[0, -1, 1], &[4, -1, 5]);
    exact("fcs example", fcs(&cur, &prev), 1)?;
    exact("fcs identity", fcs(&cur, &cur), 0)?;

    let prev = rec(0, &[0, 1, 2, -1], &[0, 0, 1, -1]);
    let cur = rec(0, &[1, 0, 2, -1], &[0, 0, 1, -1]);
    exact("fos example", fos(&cur, &prev), 2)?;
    exact("fcs of fos example", fcs(&cur, &prev), 0)?;
    exact("fis example", fis(&cur, &prev), 0.25)?;
    exact("fis identity", fis(&cur, &cur), 0.0)?;

    let prev = rec(0, &[0, -1], &[2, -1]);
    let cur = rec(0, &[0, 1], &[2, 1]);
    exact("is example", is_metric(&cur, &prev), 0.5)?;
    exact("fos of is example", fos(&cur, &prev), 0)?;
    exact("is identity", is_metric(&cur, &cur), 0.0)?;

    let mut a = EpochLog::new(0);
    let mut b = EpochLog::new(1);
    for (id, (vp, tp, vc, tc)) in [
        (&[0i64, 1, 2, -1][..], &[0i64, 0, 1, -1][..], &[1i64, 0, 2, -1][..], &[0i64, 0, 1, -1][..]),
        (&[0][..], &[1][..], &[0][..], &[1][..]),
    ]
    .into_iter()
    .enumerate()
    {
        a.insert(rec(id, vp, tp)).map_err(|e| e.to_string())?;
        let mut r = rec(id, vc, tc);
        r.epoch = 1;
        b.insert(r).map_err(|e| e.to_string())?;
    }
    exact("dataset fis", dataset_fis(&b, &a), 0.125)?;
    Ok("FCS 1, FOS 2, FIS 0.25, IS 0.5, dataset FIS 0.125".into())
}

fn random_record(rng: &mut impl Rng, n: usize, gt_classes: &[i64]) -> AssignmentRecord {
    let mut gts: Vec<i64> = (0..gt_classes.len() as i64).collect();
    for i in (1..gts.len()).rev() {
        gts.swap(i, rng.gen_range(0..=i));
    }
    let mut v = vec![UNMATCHED; n];
    let mut slots: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        slots.swap(i, rng.gen_range(0..=i));
    }
    let hits = rng.gen_range(0..=gts.len().min(n));
    for k in 0..hits {
        v[slots[k]] = gts[k];
    }
    let t: Vec<i64> = v.iter().map(|&g| if g == UNMATCHED { UNMATCHED } else { gt_classes[g as usize] }).collect();
    rec(0, &v, &t)
}

fn random_metric_properties(trials: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf15);
    for trial in 0..trials {
        let n = rng.gen_range(1..=8);
        let gt_classes: Vec<i64> = (0..rng.gen_range(0..=6)).map(|_| rng.gen_range(0..4)).collect();
        let a = random_record(&mut rng, n, &gt_classes);
        let b = random_record(&mut rng, n, &gt_classes);
        let f = fis(&a, &b).map_err(|e| e.to_string())?;
        let i = is_metric(&a, &b).map_err(|e| e.to_string())?;
        let fo = fos(&a, &b).map_err(|e| e.to_string())?;
        let fg = |x: i64, y: i64| x != UNMATCHED && y != UNMATCHED;
        let want_fos = a.v.iter().zip(&b.v).filter(|(x, y)| x != y && fg(**x, **y)).count();
        let want_fcs = a.t.iter().zip(&b.t).filter(|(x, y)| x != y && fg(**x, **y)).count();
        let want_is = a.v.iter().zip(&b.v).filter(|(x, y)| x != y).count() as f64 / n as f64;
        let ctx = || format!("trial {trial}: V {:?} / {:?}", a.v, b.v);
        ensure((0.0..=1.0).contains(&f) && (0.0..=1.0).contains(&i), || format!("{}: out of range", ctx()))?;
        ensure(f == (want_fos + want_fcs) as f64 / (2 * n) as f64, || format!("{}: fis {f}", ctx()))?;
        ensure(fo == want_fos && i == want_is, || format!("{}: fos {fo} is {i}", ctx()))?;
        ensure(i >= fo as f64 / n as f64, || format!("{}: is below fos/N", ctx()))?;
        ensure(fis(&b, &a).ok() == Some(f), || format!("{}: fis not symmetric", ctx()))?;
        ensure(fis(&a, &a).ok() == Some(0.0) && is_metric(&a, &a).ok() == Some(0.0), || {
            format!("{}: nonzero on identical records", ctx())
        })?;
    }
    Ok(format!("{trials} random record pairs"))
}

fn ap_examples() -> Outcome {
    let g = NormalizedBox::new(0.3, 0.3, 0.2, 0.2).expect("valid box");
    let far = NormalizedBox::new(0.8, 0.8, 0.1, 0.1).expect("valid box");
    let gts = vec![vec![GroundTruth { box_: g, class_id: 0 }]];
    let hit = DetectionResult {
        box_: g,
        class_id: 0,
        confidence: 1.0,
    };
    let thresholds = [0.5];
    let perfect = ap_eval(&[vec![hit]], &gts, &thresholds).map_err(|e| e.to_string())?;
    ensure(perfect.ap == 1.0, || format!("perfect predictions give AP {}", perfect.ap))?;
    let none = ap_eval(&[vec![]], &gts, &thresholds).map_err(|e| e.to_string())?;
    ensure(none.ap == 0.0, || format!("no predictions give AP {}", none.ap))?;
    let miss = DetectionResult {
        box_: far,
        class_id: 0,
        confidence: 0.2,
    };
    let hit = DetectionResult { confidence: 0.9, ..hit };
    let two = ap_eval(&[vec![miss, hit]], &gts, &thresholds).map_err(|e| e.to_string())?;
    ensure(two.ap50 == 1.0, || format!("late false positive gives AP50 {}", two.ap50))?;
    Ok("AP 1, 0, and AP50 1 with a trailing false positive".into())
}

fn metric_suite(opts: &SelftestOptions) -> Vec<Check> {
    let mut s = Suite::new("metric_oracle");
    s.record("instability_examples", worked_examples());
    s.record("instability_random_pairs", random_metric_properties(opts.metric_trials, opts.seed));
    s.record("ap_examples", ap_examples());
    s.checks
}

fn close(a: NormalizedBox, b: NormalizedBox, tol: f64) -> bool {
    a.to_array().iter().zip(b.to_array()).all(|(x, y)| (x - y).abs() <= tol)
}

fn zero_offset_identity() -> Outcome {
    let r0 = NormalizedBox::new(0.2, 0.7, 0.1, 0.3).expect("valid box");
    for scheme in RefineScheme::all() {
        let t = RefinementTrace::build(r0, &[BoxOffset::ZERO; 6], scheme).map_err(|e| e.to_string())?;
        for l in 0..6 {
            ensure(close(t.reported[l], r0, 1e-12) && close(t.detached_refs[l + 1], r0, 1e-12), || {
                format!("{scheme}: layer {} moved under zero offsets", l + 1)
            })?;
        }
    }
    Ok("all schemes, 6 layers, within 1e-12".into())
}

fn truncations() -> Outcome {
    for num_layers in 1..=6 {
        for l in 1..=num_layers {
            let w = |s| summand_weights(s, l, num_layers).map_err(|e| e.to_string());
            let dense = w(RefineScheme::LFD_SUM_EQUAL)?;
            ensure(dense[..dense.len().min(2)] == w(RefineScheme::Lft)?[..], || {
                format!("L={num_layers} l={l}: two dense summands differ from LFT")
            })?;
            ensure(dense[..1] == w(RefineScheme::Lfo)?[..], || {
                format!("L={num_layers} l={l}: one dense summand differs from LFO")
            })?;
        }
    }
    Ok("L = 1..6, every layer".into())
}

fn last_layer_dense_is_once() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a57);
    for num_layers in 1..=6 {
        let (refs, offs) = random_trace_point(&mut rng, num_layers);
        let dense = RefinementTrace::build(refs[0], &offs, RefineScheme::LFD_SUM_EQUAL).map_err(|e| e.to_string())?;
        let once = RefinementTrace::build(refs[0], &offs, RefineScheme::Lfo).map_err(|e| e.to_string())?;
        ensure(dense.reported[num_layers - 1] == once.reported[num_layers - 1], || {
            format!("L={num_layers}: last-layer boxes differ")
        })?;
    }
    Ok("L = 1..6, bitwise".into())
}

fn worked_sigmoid() -> Outcome {
    let half = NormalizedBox::new(0.5, 0.5, 0.5, 0.5).expect("valid box");
    let offs = [0.2, 0.1, 0.4].map(BoxOffset::splat);
    let t = RefinementTrace::build(half, &offs, RefineScheme::LFD_SUM_EQUAL).map_err(|e| e.to_string())?;
    let got = t.reported[0].cx;
    ensure((got - 0.668_19).abs() < 1e-5, || format!("sigma(0.7) came out as {got}"))?;
    Ok(format!("{got:.6}"))
}

fn refinement_suite() -> Vec<Check> {
    let mut s = Suite::new("refinement_identities");
    s.record("zero_offset_identity", zero_offset_identity());
    s.record("lfd_truncation", truncations());
    s.record("last_layer_lfd_equals_lfo", last_layer_dense_is_once());
    s.record("worked_example", worked_sigmoid());
    s.checks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_greedy(cost: &CostMatrix) -> Result<Assignment> {
        let mut used = vec![false; cost.cols()];
        let mut pairs = vec![];
        for r in 0..cost.rows() {
            if pairs.len() == cost.cols() {
                break;
            }
            let c = (0..cost.cols())
                .filter(|c| !used[*c])
                .min_by(|a, b| cost.get(r, *a).total_cmp(&cost.get(r, *b)))
                .unwrap();
            used[c] = true;
            pairs.push((r, c));
        }
        let total_cost = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
        Ok(Assignment {
            pairs,
            total_cost,
            excess_gts: 0,
        })
    }

    #[test]
    fn clean_build_passes() {
        let report = run(&SelftestOptions::default());
        assert!(report.passed(), "{report}");
        assert!(report.to_string().contains("hungarian_optimality"));
    }

    #[test]
    fn greedy_solver_is_caught() {
        let report = run(&SelftestOptions {
            solver: row_greedy,
            ..SelftestOptions::default()
        });
        let failed: Vec<&str> = report.failures().map(|c| c.property).collect();
        assert_eq!(failed, vec!["hungarian_optimality"]);
    }
}

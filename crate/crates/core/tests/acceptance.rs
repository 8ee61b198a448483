//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p detr-assign --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use detr_assign::assignment::{hungarian, CostMatrix};
use detr_assign::experiment::{
    default_manifest, overfit_preset, run_ablation, run_train, CellSummary, ExperimentReport, GridSpec,
};
use detr_assign::geometry::{BoxOffset, NormalizedBox};
use detr_assign::harness::{build_dataset, evaluate, train, Strategy, TrainConfig};
use detr_assign::metrics::{dataset_fis, fcs, fis, fos, is_metric, read_assignment_log, AssignmentRecord, EpochLog};
use detr_assign::numeric::FD_STEP;
use detr_assign::refinement::{
    summand_weights, tape_sensitivities, Aggregate, RefineScheme, RefinementTrace, Weighting,
};

struct Verdict {
    passed: bool,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Verdict {
    Verdict { passed: true, detail: detail.into() }
}

fn fail(detail: impl Into<String>) -> Verdict {
    Verdict { passed: false, detail: detail.into() }
}

fn within(v: Verdict, seconds: f64, budget: f64) -> Verdict {
    if v.passed && seconds >= budget {
        return fail(format!("{} (took {seconds:.1}s, budget {budget}s)", v.detail));
    }
    v
}

// ---------------------------------------------------------------- hungarian

fn min_over_permutations(c: &[Vec<f64>]) -> f64 {
    let (rows, cols) = (c.len(), c[0].len());
    let mut best = f64::INFINITY;
    if rows <= cols {
        let mut pick = vec![usize::MAX; rows];
        fn go(c: &[Vec<f64>], r: usize, pick: &mut Vec<usize>, best: &mut f64) {
            if r == c.len() {
                let total: f64 = pick.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
                *best = best.min(total);
                return;
            }
            for j in 0..c[0].len() {
                if !pick[..r].contains(&j) {
                    pick[r] = j;
                    go(c, r + 1, pick, best);
                }
            }
        }
        go(c, 0, &mut pick, &mut best);
    } else {
        let t: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| c[i][j]).collect()).collect();
        best = min_over_permutations(&t);
    }
    best
}

fn hungarian_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 1500;
    for t in 0..trials {
        let rows = rng.gen_range(1..=6);
        let cols = rng.gen_range(1..=6);
        // quarter steps keep every partial sum exact
        let c: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.gen_range(0..400) as f64 / 4.0).collect())
            .collect();
        let a = hungarian(&CostMatrix::from_rows(c.clone()).unwrap()).unwrap();
        let total: f64 = a.pairs.iter().map(|&(r, k)| c[r][k]).sum();
        let best = min_over_permutations(&c);
        if a.pairs.len() != rows.min(cols) || total != best || a.total_cost != best {
            return fail(format!("matrix {t} ({rows}x{cols}): {total} vs optimum {best}"));
        }
    }
    pass(format!("{trials} matrices up to 6x6 match enumeration exactly"))
}

// ---------------------------------------------------------- gradient reach

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expected_reach(scheme: RefineScheme, l: usize, n: usize, layers: usize) -> bool {
    n <= layers
        && match scheme {
            RefineScheme::Lfo => n == l,
            RefineScheme::Lft => n == l || n == l + 1,
            RefineScheme::Lfd { .. } => n >= l,
        }
}

fn weight(scheme: RefineScheme, l: usize, n: usize, layers: usize) -> f64 {
    if !expected_reach(scheme, l, n, layers) {
        return 0.0;
    }
    match scheme {
        RefineScheme::Lfo | RefineScheme::Lft => 1.0,
        RefineScheme::Lfd { aggregate, weighting } => {
            let w = match weighting {
                Weighting::Equal => 1.0,
                Weighting::Amplify => 2f64.powi(n as i32 - layers as i32),
                Weighting::Diminish => 2f64.powi(-(n as i32)),
            };
            match aggregate {
                Aggregate::Sum => w,
                Aggregate::Average => w / (layers - l + 1) as f64,
            }
        }
    }
}

/// Sum of the four coordinates of the layer-`l` loss-facing box.
fn reported_sum(scheme: RefineScheme, l: usize, r: NormalizedBox, offs: &[[f64; 4]]) -> f64 {
    let layers = offs.len();
    let base = [r.cx, r.cy, r.w, r.h];
    (0..4)
        .map(|c| {
            let shift: f64 = (1..=layers).map(|n| weight(scheme, l, n, layers) * offs[n - 1][c]).sum();
            sig(logit(base[c]) + shift)
        })
        .sum()
}

fn gradient_reach() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_rel: f64 = 0.0;
    let mut cells = 0;
    for layers in [3, 6] {
        for scheme in RefineScheme::all() {
            let offs: Vec<BoxOffset> = (0..layers)
                .map(|_| BoxOffset::from_array(std::array::from_fn(|_| rng.gen_range(-0.5..0.5))))
                .collect();
            let r0 = NormalizedBox::new(rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), 0.3, 0.2).unwrap();
            let trace = RefinementTrace::build(r0, &offs, scheme).unwrap();
            let refs = &trace.detached_refs;
            let tape = tape_sensitivities(scheme, refs, &offs).unwrap();
            let raw: Vec<[f64; 4]> = offs.iter().map(|d| d.to_array()).collect();
            for l in 1..=layers {
                for n in 1..=layers {
                    for c in 0..4 {
                        let mut up = raw.clone();
                        up[n - 1][c] += FD_STEP;
                        let mut down = raw.clone();
                        down[n - 1][c] -= FD_STEP;
                        let fd = (reported_sum(scheme, l, refs[l - 1], &up) - reported_sum(scheme, l, refs[l - 1], &down))
                            / (2.0 * FD_STEP);
                        let g = tape[l - 1][n - 1][c];
                        let reach = expected_reach(scheme, l, n, layers);
                        if !reach && (g != 0.0 || fd != 0.0) {
                            return fail(format!("{scheme} L={layers}: offset {n} leaks into layer {l} loss"));
                        }
                        if reach {
                            if g.abs() < 1e-8 || fd.abs() < 1e-8 {
                                return fail(format!("{scheme} L={layers}: offset {n} misses layer {l} loss"));
                            }
                            let rel = (g - fd).abs() / g.abs().max(fd.abs());
                            worst_rel = worst_rel.max(rel);
                            if rel > 1e-4 {
                                return fail(format!("{scheme} L={layers} ({l},{n}): tape {g} vs fd {fd}"));
                            }
                        }
                    }
                    cells += usize::from(expected_reach(scheme, l, n, layers));
                }
            }
        }
    }
    pass(format!("8 schemes x L in {{3,6}}, {cells} reachable cells, worst tape/fd rel err {worst_rel:.1e}"))
}

// ------------------------------------------------------ refinement identity

fn refinement_identities() -> Verdict {
    let r0 = NormalizedBox::new(0.35, 0.6, 0.25, 0.15).unwrap();
    for scheme in RefineScheme::all() {
        let t = RefinementTrace::build(r0, &[BoxOffset::ZERO; 6], scheme).unwrap();
        for b in t.reported.iter().chain(&t.detached_refs) {
            if b.to_array().iter().zip(r0.to_array()).any(|(x, y)| (x - y).abs() > 1e-12) {
                return fail(format!("{scheme}: zero offsets moved the box to {b:?}"));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for layers in 1..=6 {
        let offs: Vec<BoxOffset> = (0..layers)
            .map(|_| BoxOffset::from_array(std::array::from_fn(|_| rng.gen_range(-2.0..2.0))))
            .collect();
        let build = |s| RefinementTrace::build(r0, &offs, s).unwrap();
        let (dense, twice, once) = (build(RefineScheme::LFD_SUM_EQUAL), build(RefineScheme::Lft), build(RefineScheme::Lfo));
        if dense.reported[layers - 1] != once.reported[layers - 1] {
            return fail(format!("L={layers}: last-layer dense box differs from once"));
        }
        for l in 1..=layers {
            let d = summand_weights(RefineScheme::LFD_SUM_EQUAL, l, layers).unwrap();
            if d[..d.len().min(2)] != summand_weights(RefineScheme::Lft, l, layers).unwrap()[..]
                || d[..1] != summand_weights(RefineScheme::Lfo, l, layers).unwrap()[..]
            {
                return fail(format!("L={layers} l={l}: truncated dense sum differs"));
            }
        }
        if layers <= 2 && dense.reported != twice.reported {
            return fail(format!("L={layers}: two-summand dense boxes differ from twice"));
        }
        if layers == 1 && dense.reported != once.reported {
            return fail("L=1: single-summand dense box differs from once");
        }
    }
    let half = NormalizedBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
    let t = RefinementTrace::build(half, &[0.2, 0.1, 0.4].map(BoxOffset::splat), RefineScheme::LFD_SUM_EQUAL).unwrap();
    let v = t.reported[0].cx;
    if (v - 0.66819).abs() > 1e-5 {
        return fail(format!("worked example gave {v}"));
    }
    pass(format!("zero-offset identity (1e-12), truncations, l=L, worked example {v:.5}"))
}

// ------------------------------------------------------------ metric oracle

fn rec(epoch: usize, image_id: usize, v: &[i64], t: &[i64]) -> AssignmentRecord {
    AssignmentRecord::new(epoch, image_id, v.to_vec(), t.to_vec()).unwrap()
}

fn metric_oracles() -> Verdict {
    let same = rec(0, 0, &[0, 1, -1], &[2, 0, -1]);
    let checks = [
        ("fcs identical", fcs(&same, &same).unwrap() as f64, 0.0),
        ("fcs example", fcs(&rec(1, 0, &[0, -1, 1], &[4, -1, 5]), &rec(0, 0, &[0, -1, 1], &[3, -1, 5])).unwrap() as f64, 1.0),
        ("fos example", fos(&rec(1, 0, &[1, 0, 2, -1], &[0, 0, 1, -1]), &rec(0, 0, &[0, 1, 2, -1], &[0, 0, 1, -1])).unwrap() as f64, 2.0),
        ("fis example", fis(&rec(1, 0, &[1, 0, 2, -1], &[0, 0, 1, -1]), &rec(0, 0, &[0, 1, 2, -1], &[0, 0, 1, -1])).unwrap(), 0.25),
        ("fis identical", fis(&same, &same).unwrap(), 0.0),
        ("is example", is_metric(&rec(1, 0, &[0, 1], &[2, 1]), &rec(0, 0, &[0, -1], &[2, -1])).unwrap(), 0.5),
        ("is identical", is_metric(&same, &same).unwrap(), 0.0),
    ];
    for (name, got, want) in checks {
        if got != want {
            return fail(format!("{name}: {got} != {want}"));
        }
    }
    let mut prev = EpochLog::new(0);
    let mut cur = EpochLog::new(1);
    prev.insert(rec(0, 0, &[0, 1, 2, -1], &[0, 0, 1, -1])).unwrap();
    prev.insert(rec(0, 1, &[0], &[1])).unwrap();
    cur.insert(rec(1, 0, &[1, 0, 2, -1], &[0, 0, 1, -1])).unwrap();
    cur.insert(rec(1, 1, &[0], &[1])).unwrap();
    if dataset_fis(&cur, &prev).unwrap() != 0.125 {
        return fail("dataset mean of 0 and 0.25 is not 0.125");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pairs = 1000;
    for i in 0..pairs {
        let n = rng.gen_range(1..=10);
        let gts = rng.gen_range(0..=6i64);
        let classes: Vec<i64> = (0..gts).map(|_| rng.gen_range(0..5)).collect();
        let draw = |rng: &mut ChaCha8Rng| {
            let mut v = vec![-1i64; n];
            for g in 0..gts {
                let slot = rng.gen_range(0..n + 2);
                if slot < n && v[slot] == -1 {
                    v[slot] = g;
                }
            }
            let t: Vec<i64> = v.iter().map(|&g| if g < 0 { -1 } else { classes[g as usize] }).collect();
            (v, t)
        };
        let (va, ta) = draw(&mut rng);
        let (vb, tb) = draw(&mut rng);
        let a = rec(1, 0, &va, &ta);
        let b = rec(0, 0, &vb, &tb);
        let mut want_fcs = 0;
        let mut want_fos = 0;
        let mut flips = 0;
        for k in 0..n {
            let fg = va[k] != -1 && vb[k] != -1;
            want_fcs += usize::from(fg && ta[k] != tb[k]);
            want_fos += usize::from(fg && va[k] != vb[k]);
            flips += usize::from(va[k] != vb[k]);
        }
        let want_fis = (want_fcs + want_fos) as f64 / (2 * n) as f64;
        let got = fis(&a, &b).unwrap();
        let is = is_metric(&a, &b).unwrap();
        if got != want_fis || !(0.0..=1.0).contains(&got) || is != flips as f64 / n as f64 || fis(&a, &a).unwrap() != 0.0 {
            return fail(format!("pair {i}: V {va:?} vs {vb:?}: fis {got} (want {want_fis}), is {is}"));
        }
    }
    pass(format!("worked examples 0/1/2/0.25/0.5/0.125 exact; {pairs} random pairs match direct counts"))
}

// ------------------------------------------------------- default benchmark

struct Grid {
    report: ExperimentReport,
    seeds: Vec<u64>,
}

impl Grid {
    fn cell(&self, strategy: Strategy, scheme: RefineScheme) -> &CellSummary {
        self.report
            .cells
            .iter()
            .find(|c| c.strategy == strategy && c.scheme == scheme)
            .expect("cell in grid")
    }

    fn dir(&self, strategy: Strategy, scheme: RefineScheme, seed: u64) -> PathBuf {
        self.report.run_dir.join(format!("{strategy}_{scheme}")).join(format!("seed-{seed}"))
    }

    fn column(&self, strategy: Strategy, scheme: RefineScheme, seed: u64, file: &str, col: &str) -> Vec<String> {
        let text = fs::read_to_string(self.dir(strategy, scheme, seed).join(file)).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let i = header.iter().position(|h| *h == col).unwrap();
        lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
    }
}

fn default_grid(root: &Path) -> Grid {
    let mut m = default_manifest("acceptance", root);
    m.grid = Some(GridSpec {
        strategies: vec![Strategy::Baseline, Strategy::Csa],
        schemes: vec![RefineScheme::Lfo, RefineScheme::Lft, RefineScheme::LFD_SUM_EQUAL],
    });
    let seeds = m.seeds.clone();
    Grid {
        report: run_ablation(&m).expect("default grid runs"),
        seeds,
    }
}

fn csa_purity(grid: &Grid) -> Verdict {
    let per_class = TrainConfig::default().per_class() as i64;
    let mut matched = 0;
    let mut epochs = 0;
    for scheme in [RefineScheme::Lfo, RefineScheme::Lft, RefineScheme::LFD_SUM_EQUAL] {
        for &seed in &grid.seeds {
            let path = grid.dir(Strategy::Csa, scheme, seed).join("assignments.jsonl");
            let records = read_assignment_log(std::io::BufReader::new(fs::File::open(&path).unwrap())).unwrap();
            let mut seen = std::collections::BTreeSet::new();
            for r in &records {
                seen.insert(r.epoch);
                for (q, &t) in r.t.iter().enumerate() {
                    if t == -1 {
                        continue;
                    }
                    matched += 1;
                    if t != q as i64 / per_class {
                        return fail(format!(
                            "{scheme} seed {seed} epoch {} image {}: query {q} took class {t}",
                            r.epoch, r.image_id
                        ));
                    }
                }
            }
            epochs += seen.len();
        }
    }
    if matched == 0 {
        return fail("no foreground assignments logged");
    }
    pass(format!("{matched} foreground assignments over {epochs} logged epochs, none cross classes"))
}

fn fis_direction(grid: &Grid) -> Verdict {
    let base = grid.cell(Strategy::Baseline, RefineScheme::LFD_SUM_EQUAL);
    let csa = grid.cell(Strategy::Csa, RefineScheme::LFD_SUM_EQUAL);
    let (b, c) = (base.last_fis_median, csa.last_fis_median);
    let detail = format!(
        "last-10 FIS median: baseline {b:.4}, CSA {c:.4}, diff {:.4} ({:.0}% lower); final IS median {:.4} vs {:.4}",
        b - c,
        100.0 * (b - c) / b,
        base.final_is_median,
        csa.final_is_median
    );
    if c < b {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn ap_ordering(grid: &Grid) -> Verdict {
    let ap = |s| grid.cell(Strategy::Csa, s).ap_median;
    let (lfd, lft, lfo) = (ap(RefineScheme::LFD_SUM_EQUAL), ap(RefineScheme::Lft), ap(RefineScheme::Lfo));
    let layers: Vec<String> = [RefineScheme::Lfo, RefineScheme::Lft, RefineScheme::LFD_SUM_EQUAL]
        .iter()
        .map(|s| {
            let v: Vec<String> = grid.cell(Strategy::Csa, *s).layer_ap_median.iter().map(|a| format!("{a:.3}")).collect();
            format!("{s} [{}]", v.join(" "))
        })
        .collect();
    let detail = format!(
        "final-layer AP median LFD {lfd:.4}, LFT {lft:.4}, LFO {lfo:.4}; per-layer {}; curves in {}",
        layers.join(", "),
        grid.report.run_dir.display()
    );
    if lfd >= lft && lft >= lfo - 0.01 {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn overfit() -> Verdict {
    let (bench, cfg) = overfit_preset();
    let data = build_dataset(&bench, &cfg).unwrap();
    let out = match train(&cfg, &data.train, &data.train) {
        Ok(o) => o,
        Err(e) => return fail(e.to_string()),
    };
    let ap50 = evaluate(&out.model, &data.train, &cfg).unwrap().final_ap.ap50;
    let first = out.metrics.iter().position(|m| m.ap50 == 1.0);
    if ap50 == 1.0 {
        pass(format!("AP50 1.0 after {} epochs (first reached at epoch {})", cfg.epochs, first.map_or(0, |e| e + 1)))
    } else {
        fail(format!("AP50 {ap50} after {} epochs", cfg.epochs))
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism(grid: &Grid, root: &Path) -> Verdict {
    let mut m = default_manifest("rerun", root.join("first"));
    m.seeds = vec![0];
    let a = run_train(&m).unwrap().run_dir;
    m.output_dir = root.join("second");
    let b = run_train(&m).unwrap().run_dir;
    let (ta, tb) = (tree(&a), tree(&b));
    if ta != tb {
        return fail("two runs of the same manifest wrote different files");
    }
    let shared = tree(&grid.dir(Strategy::Csa, RefineScheme::LFD_SUM_EQUAL, 0));
    let own: BTreeMap<PathBuf, Vec<u8>> = ta
        .into_iter()
        .filter_map(|(p, v)| p.strip_prefix("csa_lfd-sum-equal/seed-0").ok().map(|q| (q.to_path_buf(), v)))
        .collect();
    if own != shared {
        return fail("train and ablate wrote different files for the same cell and seed");
    }
    let loss = grid.column(Strategy::Csa, RefineScheme::LFD_SUM_EQUAL, 0, "epochs.csv", "loss");
    pass(format!("{} files byte-identical across reruns and across train/ablate ({} epochs)", tb.len(), loss.len()))
}

fn main() -> ExitCode {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    let mut results: Vec<(&str, Verdict, f64)> = vec![];
    let mut timed = |name, budget: f64, shared: f64, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let secs = start.elapsed().as_secs_f64() + shared;
        results.push((name, within(v, secs, budget), secs));
    };
    timed("hungarian_oracle", 10.0, 0.0, &mut hungarian_oracle);
    timed("gradient_reach", 30.0, 0.0, &mut gradient_reach);
    timed("refinement_identities", 10.0, 0.0, &mut refinement_identities);
    timed("metric_oracles", 10.0, 0.0, &mut metric_oracles);
    timed("overfit_sanity", 60.0, 0.0, &mut overfit);

    let start = Instant::now();
    let grid = default_grid(&root);
    let grid_secs = start.elapsed().as_secs_f64();
    timed("csa_purity", 1200.0, grid_secs, &mut || csa_purity(&grid));
    timed("fis_csa_below_baseline", 600.0, grid_secs, &mut || fis_direction(&grid));
    timed("ap_layer_ordering", 1200.0, grid_secs, &mut || ap_ordering(&grid));
    timed("determinism", 600.0, 0.0, &mut || determinism(&grid, &root));

    let mut failed = 0;
    for (name, v, secs) in &results {
        failed += usize::from(!v.passed);
        let mark = if v.passed { "PASS" } else { "FAIL" };
        println!("[{mark}] {name:<24} {secs:>7.2}s  {}", v.detail);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

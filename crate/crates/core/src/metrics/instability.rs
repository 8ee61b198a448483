use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Marker for "matched nothing" in `V` and `T`.
pub const UNMATCHED: i64 = -1;

/// Per-image assignment outcome of one epoch.
///
/// `v[n]` is the ground-truth index matched to prediction `n` and `t[n]` its
/// class, both [`UNMATCHED`] when prediction `n` is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub epoch: usize,
    pub image_id: usize,
    #[serde(rename = "V")]
    pub v: Vec<i64>,
    #[serde(rename = "T")]
    pub t: Vec<i64>,
}

impl AssignmentRecord {
    pub fn new(epoch: usize, image_id: usize, v: Vec<i64>, t: Vec<i64>) -> Result<Self> {
        let r = Self { epoch, image_id, v, t };
        r.validate(None)?;
        Ok(r)
    }

    /// Builds `V`/`T` from per-prediction matches and the ground-truth classes.
    pub fn from_matches(
        epoch: usize,
        image_id: usize,
        matched: &[Option<usize>],
        gt_classes: &[usize],
    ) -> Result<Self> {
        let mut v = Vec::with_capacity(matched.len());
        let mut t = Vec::with_capacity(matched.len());
        for m in matched {
            match m {
                Some(g) => {
                    let class = *gt_classes
                        .get(*g)
                        .ok_or_else(|| invalid(format!("ground truth {g} out of range")))?;
                    v.push(*g as i64);
                    t.push(class as i64);
                }
                None => {
                    v.push(UNMATCHED);
                    t.push(UNMATCHED);
                }
            }
        }
        Self::new(epoch, image_id, v, t)
    }

    pub fn num_predictions(&self) -> usize {
        self.v.len()
    }

    /// Checks `|V| = |T|`, matching background markers, and (when given)
    /// that every `V` entry indexes one of `num_gts` objects.
    pub fn validate(&self, num_gts: Option<usize>) -> Result<()> {
        if self.v.len() != self.t.len() {
            return Err(invalid(format!(
                "image {}: |V|={} but |T|={}",
                self.image_id,
                self.v.len(),
                self.t.len()
            )));
        }
        for (n, (&v, &t)) in self.v.iter().zip(&self.t).enumerate() {
            if (v == UNMATCHED) != (t == UNMATCHED) {
                return Err(invalid(format!(
                    "image {}: prediction {n} has V={v} but T={t}",
                    self.image_id
                )));
            }
            if v < UNMATCHED || t < UNMATCHED {
                return Err(invalid(format!("image {}: negative index at {n}", self.image_id)));
            }
            if let Some(limit) = num_gts {
                if v >= limit as i64 {
                    return Err(invalid(format!(
                        "image {}: V[{n}]={v} but only {limit} ground truths",
                        self.image_id
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_pair(cur: &AssignmentRecord, prev: &AssignmentRecord) -> Result<()> {
    if cur.v.len() != prev.v.len() || cur.t.len() != prev.t.len() {
        return Err(invalid(format!(
            "image {}: {} predictions vs {} in the previous epoch",
            cur.image_id,
            cur.v.len(),
            prev.v.len()
        )));
    }
    if cur.v.len() != cur.t.len() || prev.v.len() != prev.t.len() {
        return Err(invalid("V and T lengths differ"));
    }
    Ok(())
}

/// Positions where both epochs are foreground and the entries differ.
fn foreground_flips(cur: &[i64], prev: &[i64]) -> usize {
    cur.iter()
        .zip(prev)
        .filter(|(a, b)| a != b && **a != UNMATCHED && **b != UNMATCHED)
        .count()
}

/// Foreground category instability: class changes among positions that are
/// foreground in both epochs.
pub fn fcs(cur: &AssignmentRecord, prev: &AssignmentRecord) -> Result<usize> {
    check_pair(cur, prev)?;
    Ok(foreground_flips(&cur.t, &prev.t))
}

/// Foreground object instability: object changes among positions that are
/// foreground in both epochs.
pub fn fos(cur: &AssignmentRecord, prev: &AssignmentRecord) -> Result<usize> {
    check_pair(cur, prev)?;
    Ok(foreground_flips(&cur.v, &prev.v))
}

/// `(FCS + FOS) / (2·N_pred)`, in [0, 1].
pub fn fis(cur: &AssignmentRecord, prev: &AssignmentRecord) -> Result<f64> {
    let n = cur.num_predictions();
    if n == 0 {
        return Err(invalid("FIS is undefined for zero predictions"));
    }
    Ok((fcs(cur, prev)? + fos(cur, prev)?) as f64 / (2 * n) as f64)
}

/// Fraction of positions whose `V` entry changed, background transitions
/// included.
pub fn is_metric(cur: &AssignmentRecord, prev: &AssignmentRecord) -> Result<f64> {
    check_pair(cur, prev)?;
    let n = cur.num_predictions();
    if n == 0 {
        return Err(invalid("IS is undefined for zero predictions"));
    }
    let flips = cur.v.iter().zip(&prev.v).filter(|(a, b)| a != b).count();
    Ok(flips as f64 / n as f64)
}

/// All records of one epoch keyed by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub records: BTreeMap<usize, AssignmentRecord>,
}

impl EpochLog {
    pub fn new(epoch: usize) -> Self {
        Self {
            epoch,
            records: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, rec: AssignmentRecord) -> Result<()> {
        if rec.epoch != self.epoch {
            return Err(invalid(format!(
                "record of epoch {} added to epoch {}",
                rec.epoch, self.epoch
            )));
        }
        if self.records.insert(rec.image_id, rec).is_some() {
            return Err(invalid(format!("duplicate image in epoch {}", self.epoch)));
        }
        Ok(())
    }
}

/// Dataset-level instability between two consecutive epochs; every field is
/// a mean over images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochInstability {
    pub epoch: usize,
    #[serde(rename = "IS")]
    pub is: f64,
    #[serde(rename = "FCS")]
    pub fcs: f64,
    #[serde(rename = "FOS")]
    pub fos: f64,
    #[serde(rename = "FIS")]
    pub fis: f64,
}

fn paired<'a>(
    cur: &'a EpochLog,
    prev: &'a EpochLog,
) -> Result<Vec<(&'a AssignmentRecord, &'a AssignmentRecord)>> {
    if cur.records.len() != prev.records.len()
        || cur.records.keys().zip(prev.records.keys()).any(|(a, b)| a != b)
    {
        return Err(invalid(format!(
            "epochs {} and {} cover different images",
            prev.epoch, cur.epoch
        )));
    }
    if cur.records.is_empty() {
        return Err(invalid("epoch log has no images"));
    }
    Ok(cur.records.values().zip(prev.records.values()).collect())
}

/// Mean per-image FIS.
pub fn dataset_fis(cur: &EpochLog, prev: &EpochLog) -> Result<f64> {
    Ok(dataset_instability(cur, prev)?.fis)
}

pub fn dataset_instability(cur: &EpochLog, prev: &EpochLog) -> Result<EpochInstability> {
    let pairs = paired(cur, prev)?;
    let n = pairs.len() as f64;
    let (mut is, mut fc, mut fo, mut fi) = (0.0, 0.0, 0.0, 0.0);
    for (c, p) in pairs {
        is += is_metric(c, p)?;
        fc += fcs(c, p)? as f64;
        fo += fos(c, p)? as f64;
        fi += fis(c, p)?;
    }
    Ok(EpochInstability {
        epoch: cur.epoch,
        is: is / n,
        fcs: fc / n,
        fos: fo / n,
        fis: fi / n,
    })
}

/// Instability for every consecutive pair of epochs, in epoch order.
pub fn instability_series(logs: &[EpochLog]) -> Result<Vec<EpochInstability>> {
    logs.windows(2)
        .map(|w| dataset_instability(&w[1], &w[0]))
        .collect()
}

/// Reads one JSON object per line; blank lines are skipped.
pub fn read_assignment_log(reader: impl BufRead) -> Result<Vec<AssignmentRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AssignmentRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate(None).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_assignment_log(mut w: impl std::io::Write, records: &[AssignmentRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Groups records into per-epoch logs sorted by epoch.
pub fn group_by_epoch(records: Vec<AssignmentRecord>) -> Result<Vec<EpochLog>> {
    let mut by_epoch: BTreeMap<usize, EpochLog> = BTreeMap::new();
    for r in records {
        by_epoch
            .entry(r.epoch)
            .or_insert_with(|| EpochLog::new(r.epoch))
            .insert(r)?;
    }
    Ok(by_epoch.into_values().collect())
}

/// CSV with columns `epoch,IS,FCS,FOS,FIS`.
pub fn write_instability_csv(w: impl std::io::Write, rows: &[EpochInstability]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(v: &[i64], t: &[i64]) -> AssignmentRecord {
        AssignmentRecord::new(0, 0, v.to_vec(), t.to_vec()).unwrap()
    }

    #[test]
    fn category_example() {
        let prev = rec(&[0, -1, 1], &[3, -1, 5]);
        let cur = rec(&[0, -1, 1], &[4, -1, 5]);
        assert_eq!(fcs(&cur, &prev).unwrap(), 1);
        assert_eq!(fcs(&cur, &cur).unwrap(), 0);
    }

    #[test]
    fn object_example_and_fis() {
        let prev = rec(&[0, 1, 2, -1], &[0, 0, 1, -1]);
        let cur = rec(&[1, 0, 2, -1], &[0, 0, 1, -1]);
        assert_eq!(fos(&cur, &prev).unwrap(), 2);
        assert_eq!(fcs(&cur, &prev).unwrap(), 0);
        assert_eq!(fis(&cur, &prev).unwrap(), 0.25);
        assert_eq!(fis(&cur, &cur).unwrap(), 0.0);
    }

    #[test]
    fn background_transitions_only_count_for_is() {
        let prev = rec(&[0, -1], &[2, -1]);
        let cur = rec(&[0, 1], &[2, 1]);
        assert_eq!(fos(&cur, &prev).unwrap(), 0);
        assert_eq!(fcs(&cur, &prev).unwrap(), 0);
        assert_eq!(is_metric(&cur, &prev).unwrap(), 0.5);
        assert_eq!(is_metric(&cur, &cur).unwrap(), 0.0);
    }

    #[test]
    fn full_swap_saturates() {
        let prev = rec(&[0, 1], &[0, 1]);
        let cur = rec(&[1, 0], &[1, 0]);
        assert_eq!(fis(&cur, &prev).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        let a = rec(&[0, 1], &[0, 1]);
        let b = rec(&[0], &[0]);
        assert!(fcs(&a, &b).is_err());
        assert!(fos(&a, &b).is_err());
        let empty = rec(&[], &[]);
        assert!(fis(&empty, &empty).is_err());
        assert!(AssignmentRecord::new(0, 0, vec![0, -1], vec![-1, -1]).is_err());
        assert!(AssignmentRecord::new(0, 0, vec![0], vec![0, 1]).is_err());
        assert!(rec(&[3], &[0]).validate(Some(3)).is_err());
    }

    fn log(epoch: usize, recs: &[(usize, &[i64], &[i64])]) -> EpochLog {
        let mut l = EpochLog::new(epoch);
        for (id, v, t) in recs {
            l.insert(AssignmentRecord::new(epoch, *id, v.to_vec(), t.to_vec()).unwrap()).unwrap();
        }
        l
    }

    #[test]
    fn dataset_mean() {
        let prev = log(0, &[(0, &[0, 1, 2, -1], &[0, 0, 1, -1]), (1, &[0], &[1])]);
        let cur = log(1, &[(0, &[1, 0, 2, -1], &[0, 0, 1, -1]), (1, &[0], &[1])]);
        assert_eq!(dataset_fis(&cur, &prev).unwrap(), 0.125);
        let single_prev = log(0, &[(7, &[0, 1, 2, -1], &[0, 0, 1, -1])]);
        let single_cur = log(1, &[(7, &[1, 0, 2, -1], &[0, 0, 1, -1])]);
        assert_eq!(dataset_fis(&single_cur, &single_prev).unwrap(), 0.25);
        let other = log(1, &[(5, &[0], &[1])]);
        assert!(dataset_fis(&other, &single_prev).is_err());
    }

    #[test]
    fn log_lines_roundtrip_and_errors() {
        let recs = vec![rec(&[0, -1], &[1, -1])];
        let mut buf = Vec::new();
        write_assignment_log(&mut buf, &recs).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "{\"epoch\":0,\"image_id\":0,\"V\":[0,-1],\"T\":[1,-1]}\n");
        assert_eq!(read_assignment_log(buf.as_slice()).unwrap(), recs);

        let bad = b"{\"epoch\":0,\"image_id\":0,\"V\":[0],\"T\":[0]}\n\nnot json\n";
        match read_assignment_log(&bad[..]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let inconsistent = b"{\"epoch\":0,\"image_id\":0,\"V\":[0],\"T\":[-1]}\n";
        assert!(matches!(read_assignment_log(&inconsistent[..]), Err(Error::Parse { line: 1, .. })));
    }

    fn record_pair() -> impl Strategy<Value = (Vec<i64>, Vec<i64>, Vec<i64>, Vec<i64>)> {
        (1usize..12).prop_flat_map(|n| {
            let slot = prop_oneof![Just(-1i64), 0i64..4];
            (
                proptest::collection::vec(slot.clone(), n),
                proptest::collection::vec(slot, n),
                proptest::collection::vec(0i64..3, n),
                proptest::collection::vec(0i64..3, n),
            )
        })
    }

    fn with_classes(v: &[i64], classes: &[i64]) -> AssignmentRecord {
        let t = v.iter().zip(classes).map(|(&v, &c)| if v < 0 { -1 } else { c }).collect();
        AssignmentRecord::new(0, 0, v.to_vec(), t).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn bounded_symmetric_and_zero_on_identity((v1, v2, c1, c2) in record_pair()) {
            let a = with_classes(&v1, &c1);
            let b = with_classes(&v2, &c2);
            let f = fis(&a, &b).unwrap();
            let i = is_metric(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert_eq!(f, fis(&b, &a).unwrap());
            prop_assert_eq!(fis(&a, &a).unwrap(), 0.0);
            prop_assert_eq!(is_metric(&a, &a).unwrap(), 0.0);
            prop_assert!(i >= fos(&a, &b).unwrap() as f64 / a.num_predictions() as f64);
        }

        #[test]
        fn invariant_to_object_relabeling((v1, v2, c1, c2) in record_pair(), perm_seed in 0usize..24) {
            let perm = permutations4()[perm_seed];
            let relabel = |v: &[i64]| v.iter().map(|&x| if x < 0 { x } else { perm[x as usize] }).collect::<Vec<_>>();
            let (a, b) = (with_classes(&v1, &c1), with_classes(&v2, &c2));
            let (ra, rb) = (with_classes(&relabel(&v1), &c1), with_classes(&relabel(&v2), &c2));
            prop_assert_eq!(fos(&a, &b).unwrap(), fos(&ra, &rb).unwrap());
            prop_assert_eq!(fcs(&a, &b).unwrap(), fcs(&ra, &rb).unwrap());
        }
    }

    fn permutations4() -> Vec<[i64; 4]> {
        let mut out = vec![];
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let p = [a, b, c, d];
                        let mut s = p;
                        s.sort();
                        if s == [0, 1, 2, 3] {
                            out.push(p);
                        }
                    }
                }
            }
        }
        out
    }
}

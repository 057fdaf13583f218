use super::TimeWindows;
use crate::cohort::Cohort;

/// Empirical mutual information (nats) of two binary variables from their
/// 2x2 contingency table. Zero when either variable is constant.
pub fn mutual_information(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "paired observations");
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let mut table = [[0usize; 2]; 2];
    for (&x, &y) in a.iter().zip(b) {
        table[x as usize][y as usize] += 1;
    }
    let n = n as f64;
    let row = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let col = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let mut mi = 0.0;
    for x in 0..2 {
        for y in 0..2 {
            let c = table[x][y];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            mi += pxy * (c as f64 * n / (row[x] as f64 * col[y] as f64)).ln();
        }
    }
    mi.max(0.0)
}

/// Reference tasks ordered by mutual information with "event starts within
/// the whole horizon", highest first; ties keep index order.
///
/// Records censored before the horizon closes without an event are left
/// out, since their horizon outcome is unknown.
pub fn rank_reference_tasks_mi(cohort: &Cohort, windows: &TimeWindows) -> Vec<(usize, f64)> {
    let (lo, hi) = windows.horizon();
    let mut target = Vec::with_capacity(cohort.len());
    let mut kept = Vec::with_capacity(cohort.len());
    for r in cohort.records() {
        let occurred = match r.event.start {
            Some(s) => s >= lo && s < hi,
            None if r.event.observed_until < hi => continue,
            None => false,
        };
        target.push(occurred);
        kept.push(r);
    }
    let mut ranked: Vec<(usize, f64)> = (0..cohort.n_ref())
        .map(|i| {
            let labels: Vec<bool> = kept.iter().map(|r| r.ref_labels[i]).collect();
            (i, mutual_information(&labels, &target))
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

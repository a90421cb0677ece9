//! CSV renderings with fixed headers. Numbers use Rust's shortest
//! round-trip formatting: period decimal separator, no grouping.

use miqrec_core::data::DatasetStats;
use miqrec_core::eval::MetricReport;
use miqrec_core::train::EpochRecord;

pub const STATS_HEADER: &str = "dataset,users,items,avg_actions_user,avg_actions_item,actions";
pub const HISTORY_HEADER: &str = "epoch,loss,val_hr10,val_ndcg10";
pub const REPORT_HEADER: &str = "phase,k,hr,ndcg,users";
pub const SWEEP_HEADER: &str = "m,d,hr5,hr10,ndcg5,ndcg10";

pub fn stats_csv(name: &str, s: &DatasetStats) -> String {
    format!(
        "{STATS_HEADER}\n{name},{},{},{},{},{}\n",
        s.users, s.items, s.avg_actions_user, s.avg_actions_item, s.actions
    )
}

pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in records {
        match r.validation {
            Some((hr, ndcg)) => out.push_str(&format!("{},{},{hr},{ndcg}\n", r.epoch, r.loss)),
            None => out.push_str(&format!("{},{},,\n", r.epoch, r.loss)),
        }
    }
    out
}

pub fn report_csv(reports: &[MetricReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        for c in &r.cutoffs {
            out.push_str(&format!("{},{},{},{},{}\n", r.phase.name(), c.k, c.hr, c.ndcg, r.users));
        }
    }
    out
}

/// One sweep cell; `metrics` is `None` when the cell failed.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub m: usize,
    pub d: usize,
    pub metrics: Option<[f64; 4]>,
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for c in cells {
        match c.metrics {
            Some([hr5, hr10, ndcg5, ndcg10]) => {
                out.push_str(&format!("{},{},{hr5},{hr10},{ndcg5},{ndcg10}\n", c.m, c.d))
            }
            None => out.push_str(&format!("{},{},,,,\n", c.m, c.d)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use miqrec_core::data::Phase;
    use miqrec_core::eval::MetricReport;

    #[test]
    fn headers_and_rows() {
        let s = DatasetStats::from_counts(2, 4, 5).unwrap();
        assert_eq!(stats_csv("toy", &s), format!("{STATS_HEADER}\ntoy,2,4,2.5,1.25,5\n"));
        let h = history_csv(&[
            EpochRecord { epoch: 1, loss: 0.5, validation: None },
            EpochRecord { epoch: 2, loss: 0.25, validation: Some((1.0, 0.5)) },
        ]);
        assert_eq!(h, format!("{HISTORY_HEADER}\n1,0.5,,\n2,0.25,1,0.5\n"));
        let r = MetricReport::from_ranks(Phase::Test, &[1, 3], &[5], true).unwrap();
        assert_eq!(report_csv(&[r]), format!("{REPORT_HEADER}\ntest,5,1,0.75,2\n"));
        let cells = [SweepCell { m: 1, d: 8, metrics: None }];
        assert_eq!(sweep_csv(&cells).lines().count(), 2);
    }
}

use crate::error::{Error, Result};

/// Confusion matrix (rows = reference, columns = prediction) and the
/// accuracy figures derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Producer accuracy per class; `None` when the class has no reference pixels.
    pub pa: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument(
                "confusion matrix must be square and non-empty".into(),
            ));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::InvalidArgument(
                "no evaluated pixels (all reference labels ignored)".into(),
            ));
        }
        let n = total as f64;
        let diag: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..k).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
        let oa = diag as f64 / n;
        let pa: Vec<Option<f64>> = (0..k)
            .map(|i| (rows[i] > 0).then(|| confusion[i][i] as f64 / rows[i] as f64))
            .collect();
        let defined: Vec<f64> = pa.iter().flatten().copied().collect();
        let aa = defined.iter().sum::<f64>() / defined.len() as f64;
        let pe = (0..k).map(|i| rows[i] as f64 * cols[i] as f64).sum::<f64>() / (n * n);
        // p_e = 1 means a single class on both sides, which is then a perfect match.
        let kappa = if pe < 1.0 { (oa - pe) / (1.0 - pe) } else { 1.0 };
        Ok(MetricsReport {
            confusion,
            oa,
            aa,
            kappa,
            pa,
        })
    }

    pub fn classes(&self) -> usize {
        self.confusion.len()
    }

    /// Matrix rows, then OA/AA/kappa and per-class PA as percentages with two decimals.
    pub fn to_text(&self) -> String {
        let mut s = format!("classes = {}\n", self.classes());
        for (i, row) in self.confusion.iter().enumerate() {
            let r: Vec<String> = row.iter().map(u64::to_string).collect();
            s.push_str(&format!("row{i} = {}\n", r.join(",")));
        }
        s.push_str(&format!(
            "OA = {}\nAA = {}\nkappa = {}\n",
            pct(self.oa),
            pct(self.aa),
            pct(self.kappa)
        ));
        let pa: Vec<String> = self.pa.iter().map(|p| p.map_or("-".to_string(), pct)).collect();
        s.push_str(&format!("PA = {}\n", pa.join(",")));
        s
    }
}

/// `0.92114 → "92.11"`.
pub fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Confusion-matrix metrics over pixels whose reference label is not `ignore`.
pub fn compute_metrics(pred: &[i64], gt: &[i64], classes: usize, ignore: i64) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::shape("compute_metrics", &[pred.len()], &[gt.len()]));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    let in_range = |v: i64| v >= 0 && (v as usize) < classes;
    for (&p, &g) in pred.iter().zip(gt) {
        if g == ignore {
            continue;
        }
        if !in_range(g) {
            return Err(Error::InvalidArgument(format!(
                "reference label {g} outside [0, {classes})"
            )));
        }
        if !in_range(p) {
            return Err(Error::InvalidArgument(format!(
                "predicted label {p} outside [0, {classes})"
            )));
        }
        m[g as usize][p as usize] += 1;
    }
    MetricsReport::from_confusion(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let r = MetricsReport::from_confusion(vec![vec![2, 0], vec![1, 1]]).unwrap();
        assert_eq!(r.oa, 0.75);
        assert_eq!(r.kappa, 0.5);
        assert_eq!(r.aa, 0.75);
        assert_eq!(r.pa, vec![Some(1.0), Some(0.5)]);
        let t = r.to_text();
        assert!(t.contains("OA = 75.00\n"), "{t}");
        assert!(t.contains("kappa = 50.00\n"));
        assert!(t.starts_with("classes = 2\nrow0 = 2,0\nrow1 = 1,1\n"));
    }

    #[test]
    fn perfect_prediction() {
        let gt = vec![0, 1, 2, 2, -1];
        let r = compute_metrics(&gt, &gt, 3, -1).unwrap();
        assert_eq!((r.oa, r.aa, r.kappa), (1.0, 1.0, 1.0));
        assert!(r.pa.iter().all(|p| *p == Some(1.0)));
    }

    #[test]
    fn ignore_only_is_an_error() {
        assert!(compute_metrics(&[0, 1], &[-1, -1], 2, -1).is_err());
        assert!(compute_metrics(&[5], &[0], 2, -1).is_err());
    }

    #[test]
    fn two_decimal_rendering() {
        assert_eq!(pct(0.92114), "92.11");
        assert_eq!(pct(1.0), "100.00");
    }
}

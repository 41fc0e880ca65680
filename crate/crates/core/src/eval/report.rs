use std::fmt::Write as _;
use std::path::Path;

use super::{Aggregation, DiceReport, ModelTag};
use crate::error::{Error, Result};

const HEADER: &str = "experiment,model_tag,dataset_id,aggregation,class,dice";

/// One row per (experiment, model tag, class). `class` is the class index
/// or `mean` for the foreground mean.
pub fn write_reports_csv(path: &Path, rows: &[(String, DiceReport)]) -> Result<()> {
    let mut s = String::from(HEADER);
    s.push('\n');
    for (exp, r) in rows {
        if exp.contains(',') || r.dataset_id.contains(',') {
            return Err(Error::Input("CSV fields must not contain commas".into()));
        }
        let mut line = |class: &str, d: f64| {
            let _ = writeln!(
                s,
                "{exp},{},{},{},{class},{d}",
                r.model_tag.as_str(),
                r.dataset_id,
                r.aggregation.as_str()
            );
        };
        for (k, &d) in r.per_class.iter().enumerate() {
            line(&k.to_string(), d);
        }
        line("mean", r.mean);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Inverse of [`write_reports_csv`]; means are recomputed from the classes.
pub fn read_reports_csv(path: &Path) -> Result<Vec<(String, DiceReport)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::format(path, "missing or unexpected CSV header"));
    }
    let mut out: Vec<(String, DiceReport)> = Vec::new();
    let mut pending: Option<(String, ModelTag, String, Aggregation, Vec<f64>)> = None;
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let tag = ModelTag::parse(f[1]).ok_or_else(|| bad("unknown model tag"))?;
        let agg = Aggregation::parse(f[3]).ok_or_else(|| bad("unknown aggregation"))?;
        let dice: f64 = f[5].parse().map_err(|_| bad("bad dice value"))?;
        if f[4] == "mean" {
            let (exp, tag, ds, agg, per_class) = pending.take().ok_or_else(|| bad("mean without classes"))?;
            out.push((exp, DiceReport::from_per_class(per_class, tag, ds, agg)));
            continue;
        }
        let k: usize = f[4].parse().map_err(|_| bad("bad class index"))?;
        let p = pending.get_or_insert_with(|| (f[0].to_string(), tag, f[2].to_string(), agg, Vec::new()));
        if k != p.4.len() {
            return Err(bad("class rows out of order"));
        }
        p.4.push(dice);
    }
    if pending.is_some() {
        return Err(Error::format(path, "report without mean row"));
    }
    Ok(out)
}

/// `experiment.model_tag.mean=...` and per-class lines.
pub fn write_summary(path: &Path, rows: &[(String, DiceReport)]) -> Result<()> {
    let mut s = String::new();
    for (exp, r) in rows {
        let key = format!("{exp}.{}", r.model_tag.as_str());
        let _ = writeln!(s, "{key}.mean={:.6}", r.mean);
        let _ = writeln!(s, "{key}.background={:.6}", r.background());
        for (k, d) in r.per_class.iter().enumerate().skip(1) {
            let _ = writeln!(s, "{key}.class{k}={d:.6}");
        }
        let _ = writeln!(s, "{key}.aggregation={}", r.aggregation.as_str());
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![
            (
                "mkd".to_string(),
                DiceReport::from_per_class(vec![0.99, 0.5, 0.75], ModelTag::Ensemble, "target", Aggregation::Micro),
            ),
            (
                "mkd".to_string(),
                DiceReport::from_per_class(vec![0.9, 0.25, 0.5], ModelTag::Syn, "target", Aggregation::Macro),
            ),
        ];
        write_reports_csv(&p, &rows).unwrap();
        assert_eq!(read_reports_csv(&p).unwrap(), rows);
        write_summary(&dir.path().join("s.txt"), &rows).unwrap();
    }
}

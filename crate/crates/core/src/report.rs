//! CSV emission. Every file starts with the `#fedopl-csv-v1` schema line and
//! floats use the shortest representation that round-trips.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::aipw::ClientScores;
use crate::diagnostics::{RegretReport, ShiftReport, SkewnessReport};
use crate::error::Result;
use crate::experiments::{CellFailure, ExperimentOutput, SkewnessRow};
use crate::federation::RoundLog;
use crate::scalar::Scalar;
use crate::types::LinearPolicy;

pub const SCHEMA_LINE: &str = "#fedopl-csv-v1";

pub const REGRET_HEADER: [&str; 8] = ["scenario", "n", "seed", "policy", "client", "metric", "value", "se"];
pub const SKEWNESS_HEADER: [&str; 5] = ["scenario", "n", "skewness", "chi2", "sqrt_skewness_over_n"];
pub const SHIFT_HEADER: [&str; 7] = ["client", "other", "kl_context", "kl_propensity", "kl_reward", "kl_reward_se", "tv_upper"];
pub const TRAINING_LOG_HEADER: [&str; 6] = ["n", "seed", "round", "participants", "mean_local_loss", "theta_norm"];
pub const FAILURE_HEADER: [&str; 3] = ["n", "seed", "message"];

fn num<T: Scalar>(v: T) -> String {
    format!("{v}")
}

fn opt<T: Scalar>(v: Option<T>) -> String {
    v.map_or_else(|| "inf".to_string(), num)
}

/// CSV writer that emits the schema line before the header.
pub fn writer<W: Write>(mut out: W, header: &[&str]) -> Result<csv::Writer<W>> {
    writeln!(out, "{SCHEMA_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    Ok(w)
}

pub fn write_regret<W: Write, T: Scalar>(w: &mut csv::Writer<W>, scenario: &str, report: &RegretReport<T>) -> Result<()> {
    let (n, seed) = (report.n.to_string(), report.seed.to_string());
    let mut row = |client: &str, metric: &str, value: T, se: T| {
        w.write_record([scenario, &n, &seed, &report.policy, client, metric, &num(value), &num(se)])
    };
    row("global", "regret", report.global_regret.value, report.global_regret.se)?;
    row("global", "value", report.global_value.value, report.global_value.se)?;
    for (c, (r, v)) in report.local_regret.iter().zip(&report.local_value).enumerate() {
        let client = c.to_string();
        row(&client, "regret", r.value, r.se)?;
        row(&client, "value", v.value, v.se)?;
    }
    Ok(())
}

pub fn write_skewness<W: Write, T: Scalar>(w: &mut csv::Writer<W>, scenario: &str, row: &SkewnessRow<T>) -> Result<()> {
    w.write_record([
        scenario,
        &row.n.to_string(),
        &opt(row.skewness),
        &opt(row.chi2),
        &opt(row.sqrt_skewness_over_n),
    ])?;
    Ok(())
}

/// Skewness row for an ad-hoc `(lambda, counts)` pair.
pub fn skewness_row<T: Scalar>(report: &SkewnessReport<T>, n: usize) -> SkewnessRow<T> {
    SkewnessRow {
        n,
        skewness: report.skewness,
        chi2: report.chi2,
        sqrt_skewness_over_n: report.skewness.map(|s| (s / T::of_usize(n)).sqrt()),
    }
}

pub fn write_shift<W: Write, T: Scalar>(w: &mut csv::Writer<W>, shift: &ShiftReport<T>) -> Result<()> {
    for (c, row) in shift.pairs.iter().enumerate() {
        for (k, t) in row.iter().enumerate() {
            w.write_record([
                c.to_string(),
                k.to_string(),
                num(t.kl_context),
                num(t.kl_propensity),
                num(t.kl_reward),
                num(t.kl_reward_se),
                num(shift.tv_upper[c]),
            ])?;
        }
    }
    Ok(())
}

pub fn write_training_log<W: Write, T: Scalar>(w: &mut csv::Writer<W>, n: usize, seed: u64, log: &[RoundLog<T>]) -> Result<()> {
    for r in log {
        let ids: Vec<String> = r.participants.iter().map(usize::to_string).collect();
        w.write_record([
            n.to_string(),
            seed.to_string(),
            r.round.to_string(),
            ids.join(";"),
            num(r.mean_local_loss),
            num(r.theta_norm),
        ])?;
    }
    Ok(())
}

pub fn write_scores<W: Write, T: Scalar>(out: W, clients: &[ClientScores<T>]) -> Result<()> {
    let d = clients.first().and_then(|c| c.rows.first()).map_or(0, |r| r.scores.len());
    let mut header = vec!["client".to_string(), "index".to_string(), "fold".to_string()];
    header.extend((0..d).map(|a| format!("score_{a}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = writer(out, &header_refs)?;
    for c in clients {
        for (i, row) in c.rows.iter().enumerate() {
            let fold = c.folds.as_ref().map_or_else(String::new, |f| f[i].to_string());
            let mut rec = vec![c.client_id.to_string(), i.to_string(), fold];
            rec.extend(row.scores.iter().map(|s| num(*s)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per action: bias then the `q` coefficients.
pub fn write_policy<W: Write, T: Scalar>(out: W, policy: &LinearPolicy<T>) -> Result<()> {
    let q = policy.theta().cols();
    let mut header = vec!["action".to_string(), "bias".to_string()];
    header.extend((0..q).map(|j| format!("theta_{j}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = writer(out, &header_refs)?;
    for a in 0..policy.theta().rows() {
        let mut rec = vec![a.to_string(), num(policy.bias()[a])];
        rec.extend(policy.theta().row(a).iter().map(|v| num(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_failures<W: Write>(out: W, failures: &[CellFailure]) -> Result<()> {
    let mut w = writer(out, &FAILURE_HEADER)?;
    for f in failures {
        w.write_record([f.n.to_string(), f.seed.to_string(), f.message.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every experiment artifact into `dir`.
pub fn write_experiment<T: Scalar>(dir: &Path, out: &ExperimentOutput<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let scenario = out.manifest.scenario.name();
    fs::write(dir.join("manifest_resolved.toml"), out.manifest.to_toml()?)?;

    let mut w = writer(fs::File::create(dir.join("regret.csv"))?, &REGRET_HEADER)?;
    for r in out.reports() {
        write_regret(&mut w, scenario, r)?;
    }
    w.flush()?;

    let mut w = writer(fs::File::create(dir.join("skewness.csv"))?, &SKEWNESS_HEADER)?;
    for row in &out.skewness {
        write_skewness(&mut w, scenario, row)?;
    }
    w.flush()?;

    let mut w = writer(fs::File::create(dir.join("shift.csv"))?, &SHIFT_HEADER)?;
    write_shift(&mut w, &out.shift)?;
    w.flush()?;

    let mut w = writer(fs::File::create(dir.join("training_log.csv"))?, &TRAINING_LOG_HEADER)?;
    for cell in &out.cells {
        write_training_log(&mut w, cell.n, cell.seed, &cell.training_log)?;
    }
    w.flush()?;

    if !out.failures.is_empty() {
        write_failures(fs::File::create(dir.join("failures.csv"))?, &out.failures)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::Estimate;

    #[test]
    fn regret_rows_have_the_documented_shape() {
        let e = |v: f64| Estimate { value: v, se: 0.1 };
        let report = RegretReport {
            n: 100,
            seed: 2,
            policy: "local_1".to_string(),
            global_regret: e(0.5),
            local_regret: vec![e(1.0 / 3.0), e(0.25)],
            global_value: e(1.0),
            local_value: vec![e(1.0), e(2.0)],
            reference_global_value: e(1.5),
            reference_local_value: vec![e(1.5), e(2.5)],
        };
        let mut buf = Vec::new();
        {
            let mut w = writer(&mut buf, &REGRET_HEADER).unwrap();
            write_regret(&mut w, "homogeneous", &report).unwrap();
            w.flush().unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SCHEMA_LINE);
        assert_eq!(lines[1], "scenario,n,seed,policy,client,metric,value,se");
        assert_eq!(lines[2], "homogeneous,100,2,local_1,global,regret,0.5,0.1");
        assert_eq!(lines[4], "homogeneous,100,2,local_1,0,regret,0.3333333333333333,0.1");
        assert_eq!(lines.len(), 2 + 6);
        let parsed: f64 = lines[4].split(',').nth(6).unwrap().parse().unwrap();
        assert_eq!(parsed, 1.0 / 3.0);
    }
}

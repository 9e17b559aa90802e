use crate::error::{Error, Result};
use serde::Serialize;
use std::collections::BTreeMap;

pub const REPORT_HEADER: &str =
    "# desk-scale embedding providers: values are not comparable to published FAD/KID/IS figures";

/// One score with the facts needed to interpret it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricEntry {
    pub value: f64,
    pub reference_count: usize,
    pub candidate_count: usize,
    pub provider: String,
    pub seed: u64,
}

/// The eight evaluation scores. Scores whose inputs were unavailable stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub mode: String,
    pub ndb_over_k: Option<MetricEntry>,
    pub pkid: Option<MetricEntry>,
    pub ikid: Option<MetricEntry>,
    pub pis: Option<MetricEntry>,
    pub iis: Option<MetricEntry>,
    pub mse: Option<MetricEntry>,
    pub mae: Option<MetricEntry>,
    pub fad: Option<MetricEntry>,
    pub extra: BTreeMap<String, String>,
}

impl MetricReport {
    fn entries(&self) -> [(&'static str, &Option<MetricEntry>); 8] {
        [
            ("ndb_over_k", &self.ndb_over_k),
            ("pkid", &self.pkid),
            ("ikid", &self.ikid),
            ("pis", &self.pis),
            ("iis", &self.iis),
            ("mse", &self.mse),
            ("mae", &self.mae),
            ("fad", &self.fad),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, e) in self.entries() {
            if let Some(e) = e {
                if !e.value.is_finite() {
                    return Err(Error::Numerical(format!("{name} is not finite")));
                }
            }
        }
        if let Some(e) = &self.ndb_over_k {
            if !(0.0..=1.0).contains(&e.value) {
                return Err(Error::Numerical(format!("ndb_over_k {} outside [0, 1]", e.value)));
            }
        }
        Ok(())
    }

    /// Header line, then `key = value` per line, with provenance keys after each score.
    pub fn to_text(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\nmode = {}\n", self.mode);
        for (name, e) in self.entries() {
            match e {
                Some(e) => {
                    out += &format!("{name} = {:.6}\n", e.value);
                    out += &format!(
                        "{name}.provenance = provider={} reference={} candidate={} seed={}\n",
                        e.provider, e.reference_count, e.candidate_count, e.seed
                    );
                }
                None => out += &format!("{name} = n/a\n"),
            }
        }
        for (k, v) in &self.extra {
            out += &format!("{k} = {v}\n");
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serialises");
        v["comparability"] = serde_json::Value::String(REPORT_HEADER.trim_start_matches("# ").into());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(v: f64) -> Option<MetricEntry> {
        Some(MetricEntry {
            value: v,
            reference_count: 4,
            candidate_count: 4,
            provider: "mel_stats".into(),
            seed: 1,
        })
    }

    #[test]
    fn text_and_json() {
        let r = MetricReport {
            mode: "reconstruction".into(),
            mse: entry(0.5),
            ndb_over_k: entry(0.2),
            ..Default::default()
        };
        r.validate().unwrap();
        let t = r.to_text();
        assert!(t.starts_with(REPORT_HEADER));
        assert!(t.contains("mse = 0.500000\n"));
        assert!(t.contains("fad = n/a\n"));
        assert!(t.lines().skip(1).all(|l| l.contains(" = ")));
        let j = r.to_json();
        assert_eq!(j["mse"]["value"], 0.5);
        assert!(j["fad"].is_null());
        assert!(j["comparability"].as_str().unwrap().contains("not comparable"));
    }

    #[test]
    fn rejects_out_of_range() {
        let r = MetricReport {
            ndb_over_k: entry(1.5),
            ..Default::default()
        };
        assert!(r.validate().is_err());
        let r = MetricReport {
            fad: entry(f64::NAN),
            ..Default::default()
        };
        assert!(r.validate().is_err());
    }
}

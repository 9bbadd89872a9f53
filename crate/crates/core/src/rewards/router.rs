use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RewardError;
use crate::batch::SampleRecord;

/// Domain tag to reward cluster, plus prompt sampling ratios per domain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouteTable {
    pub routes: BTreeMap<String, String>,
    pub ratios: BTreeMap<String, f64>,
}

impl RouteTable {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.ratios.is_empty() {
            return Err(RewardError::Config("rewards.ratios is empty".into()));
        }
        for (domain, &r) in &self.ratios {
            if !self.routes.contains_key(domain) {
                return Err(RewardError::Config(format!("rewards.ratios.{domain} has no route")));
            }
            if !(r >= 0.0 && r.is_finite()) {
                return Err(RewardError::Config(format!("rewards.ratios.{domain} must be >= 0, got {r}")));
            }
        }
        let total: f64 = self.ratios.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(RewardError::Config(format!("rewards.ratios must sum to 1, got {total}")));
        }
        Ok(())
    }

    pub fn route(&self, domain_tag: &str) -> Result<&str, RewardError> {
        self.routes.get(domain_tag).map(String::as_str).ok_or_else(|| RewardError::Routing(domain_tag.to_string()))
    }

    /// Draw a domain according to the ratios.
    pub fn sample_domain(&self, rng: &mut impl Rng) -> &str {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = "";
        for (domain, &r) in &self.ratios {
            if r <= 0.0 {
                continue;
            }
            acc += r;
            last = domain;
            if u < acc {
                return domain;
            }
        }
        last
    }
}

/// Routes samples and counts arrivals per reward cluster.
#[derive(Clone, Debug, Default)]
pub struct Router {
    table: RouteTable,
    arrivals: BTreeMap<String, u64>,
}

impl Router {
    pub fn new(table: RouteTable) -> Result<Self, RewardError> {
        table.validate()?;
        Ok(Self { table, arrivals: BTreeMap::new() })
    }

    pub fn table(&self) -> &RouteTable {
        &self.table
    }

    pub fn route(&mut self, sample: &SampleRecord) -> Result<String, RewardError> {
        let cluster = self.table.route(&sample.domain_tag)?.to_string();
        *self.arrivals.entry(cluster.clone()).or_default() += 1;
        Ok(cluster)
    }

    pub fn arrivals(&self) -> &BTreeMap<String, u64> {
        &self.arrivals
    }

    pub fn total_arrivals(&self) -> u64 {
        self.arrivals.values().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> RouteTable {
        RouteTable {
            routes: [("math", "math_verifier"), ("code", "sandbox"), ("general", "general_matcher")]
                .into_iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            ratios: [("math", 0.4), ("code", 0.3), ("general", 0.3)].into_iter().map(|(a, b)| (a.to_string(), b)).collect(),
        }
    }

    #[test]
    fn routes_known_tags_only() {
        let mut r = Router::new(table()).unwrap();
        assert_eq!(r.route(&SampleRecord::prompt(0, 0, "math", vec![1])).unwrap(), "math_verifier");
        assert_eq!(r.route(&SampleRecord::prompt(1, 1, "unknown", vec![1])), Err(RewardError::Routing("unknown".into())));
        assert_eq!(r.total_arrivals(), 1);
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let mut t = table();
        t.ratios.insert("math".into(), 0.5);
        assert!(t.validate().is_err());
        let mut t = table();
        t.routes.remove("code");
        assert!(t.validate().is_err());
    }
}

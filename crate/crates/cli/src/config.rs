//! The run configuration document.
//!
//! A run is described by one JSON file. Command-line flags given to `ivcf
//! run` override the matching fields; `--paper-scale` is applied before
//! `--trees`, so an explicit tree count always wins.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ivcf_core::aggregate::{Estimand, SignRule, DEFAULT_QUANTILES, DEFAULT_TRIM};
use ivcf_core::policy::Direction;
use ivcf_core::{Error, Result, Schema, SubgroupSpec, TreeParams};

/// The schema inline, or a path to a schema JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaSource {
    Path(PathBuf),
    Inline(Schema),
}

impl SchemaSource {
    pub fn resolve(&self) -> Result<Schema> {
        match self {
            SchemaSource::Path(p) => Schema::from_json_file(p),
            SchemaSource::Inline(s) => Ok(s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Significance levels for the ITE share tables; the first also flags
    /// histogram bars.
    pub levels: Vec<f64>,
    pub quantiles: Vec<f64>,
    /// Share trimmed from each histogram tail.
    pub trim: f64,
    pub sign_rule: SignRule,
    /// Deepest level counted by variable importance.
    pub importance_depth: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            levels: vec![0.10, 0.05],
            quantiles: DEFAULT_QUANTILES.to_vec(),
            trim: DEFAULT_TRIM,
            sign_rule: SignRule::Strict,
            importance_depth: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Outcome whose doubly robust scores are the rewards.
    pub outcome: String,
    pub direction: Direction,
    pub features: Vec<String>,
    #[serde(default = "default_policy_depth")]
    pub depth: usize,
    /// Capacity for the unconstrained top-K allocation; skipped when unset.
    #[serde(default)]
    pub capacity: Option<usize>,
}

fn default_policy_depth() -> usize {
    2
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: PathBuf,
    pub schema: SchemaSource,
    #[serde(default = "default_estimand")]
    pub estimand: Estimand,
    #[serde(default)]
    pub forest: TreeParams,
    /// Grow the effect forest on nuisance residuals.
    #[serde(default = "default_true")]
    pub center: bool,
    #[serde(default)]
    pub inference: InferenceConfig,
    /// Outcome columns to analyse; empty means the schema's outcome.
    #[serde(default)]
    pub outcomes: Vec<String>,
    /// Predicates such as `age>=50`.
    #[serde(default)]
    pub subgroups: Vec<String>,
    /// Also report each subgroup's complement.
    #[serde(default = "default_true")]
    pub complements: bool,
    #[serde(default)]
    pub policy: Option<PolicyConfig>,
    pub output_dir: PathBuf,
    /// Overrides `forest.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_estimand() -> Estimand {
    Estimand::Late
}

/// Command-line overrides, applied in field order.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub estimand: Option<Estimand>,
    pub paper_scale: bool,
    pub n_trees: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidParameter(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidParameter(format!("config {}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.input {
            self.input = p.clone();
        }
        if let Some(p) = &o.output_dir {
            self.output_dir = p.clone();
        }
        if let Some(e) = o.estimand {
            self.estimand = e;
        }
        if o.paper_scale {
            self.forest.n_trees = TreeParams::PAPER_SCALE_TREES;
        }
        if let Some(t) = o.n_trees {
            self.forest.n_trees = t;
        }
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
    }

    /// Forest parameters with the top-level seed folded in.
    pub fn tree_params(&self) -> TreeParams {
        TreeParams {
            seed: self.seed.unwrap_or(self.forest.seed),
            ..self.forest.clone()
        }
    }

    /// The schema to ingest with. Under ITT the treatment column is
    /// dropped, so data without one is accepted.
    pub fn schema(&self) -> Result<Schema> {
        let mut s = self.schema.resolve()?;
        if self.estimand == Estimand::Itt {
            s.treatment = None;
        }
        Ok(s)
    }

    pub fn outcomes(&self, schema: &Schema) -> Vec<String> {
        if self.outcomes.is_empty() {
            vec![schema.outcome.clone()]
        } else {
            self.outcomes.clone()
        }
    }

    pub fn subgroup_specs(&self) -> Result<Vec<SubgroupSpec>> {
        self.subgroups.iter().map(|s| SubgroupSpec::parse(s)).collect()
    }

    /// Checks that settings are consistent and that every referenced
    /// column is among `headers`.
    pub fn validate(&self, schema: &Schema, headers: &[String]) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        self.tree_params().validate(schema.covariates.len().max(1))?;
        let outcomes = self.outcomes(schema);
        let unique: BTreeSet<&String> = outcomes.iter().collect();
        if unique.len() != outcomes.len() {
            return bad("outcome list has duplicates".into());
        }
        for o in &outcomes {
            if !headers.contains(o) {
                return Err(Error::MissingColumn(o.clone()));
            }
        }
        let covariate = |c: &str| schema.covariates.iter().any(|x| x == c);
        for s in self.subgroup_specs()? {
            if !covariate(&s.column) {
                return bad(format!("subgroup column `{}` is not a covariate", s.column));
            }
        }
        let inf = &self.inference;
        if inf.levels.is_empty() || inf.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return bad("significance levels must lie in (0, 1)".into());
        }
        if inf.quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return bad("quantile levels must lie in [0, 1]".into());
        }
        if !(0.0..0.5).contains(&inf.trim) {
            return bad(format!("trim {} not in [0, 0.5)", inf.trim));
        }
        if inf.importance_depth == 0 {
            return bad("importance_depth must be positive".into());
        }
        if let Some(p) = &self.policy {
            if !outcomes.contains(&p.outcome) {
                return bad(format!("policy outcome `{}` is not an analysed outcome", p.outcome));
            }
            if p.features.is_empty() {
                return bad("policy needs at least one feature".into());
            }
            if let Some(f) = p.features.iter().find(|f| !covariate(f)) {
                return bad(format!("policy feature `{f}` is not a covariate"));
            }
            check_policy_depth(p.depth)?;
            if p.capacity == Some(0) {
                return bad("capacity K must be at least 1".into());
            }
        }
        Ok(())
    }
}

pub fn check_policy_depth(depth: usize) -> Result<()> {
    if depth > 2 {
        return Err(Error::InvalidParameter(format!(
            "policy tree depth {depth} rejected: exhaustive search cost grows exponentially with depth; use 1 or 2"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RunConfig {
        serde_json::from_str(
            r#"{"input": "d.csv", "output_dir": "out",
                "schema": {"outcome": "y", "treatment": "d", "instrument": "z", "covariates": ["a", "b"]}}"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let c = minimal();
        assert_eq!(c.estimand, Estimand::Late);
        assert_eq!(c.forest.n_trees, 2000);
        assert!(c.center && c.complements);
        assert_eq!(c.outcomes(&c.schema().unwrap()), vec!["y".to_string()]);
    }

    #[test]
    fn explicit_trees_beat_paper_scale() {
        let mut c = minimal();
        c.apply(&Overrides {
            paper_scale: true,
            ..Default::default()
        });
        assert_eq!(c.forest.n_trees, TreeParams::PAPER_SCALE_TREES);
        c.apply(&Overrides {
            paper_scale: true,
            n_trees: Some(300),
            seed: Some(9),
            ..Default::default()
        });
        assert_eq!(c.forest.n_trees, 300);
        assert_eq!(c.tree_params().seed, 9);
    }

    #[test]
    fn itt_drops_treatment() {
        let mut c = minimal();
        c.estimand = Estimand::Itt;
        assert_eq!(c.schema().unwrap().treatment, None);
    }

    #[test]
    fn validation() {
        let headers: Vec<String> = ["y", "d", "z", "a", "b"].iter().map(|s| s.to_string()).collect();
        let mut c = minimal();
        let schema = c.schema().unwrap();
        c.validate(&schema, &headers).unwrap();

        c.outcomes = vec!["y".into(), "w".into()];
        assert!(matches!(c.validate(&schema, &headers), Err(Error::MissingColumn(_))));
        c.outcomes.clear();

        c.subgroups = vec!["c>1".into()];
        assert!(c.validate(&schema, &headers).is_err());
        c.subgroups = vec!["a>1".into()];
        c.validate(&schema, &headers).unwrap();

        c.policy = Some(PolicyConfig {
            outcome: "y".into(),
            direction: Direction::Minimize,
            features: vec!["a".into()],
            depth: 3,
            capacity: None,
        });
        let err = c.validate(&schema, &headers).unwrap_err().to_string();
        assert!(err.contains("exponentially"), "{err}");
    }
}

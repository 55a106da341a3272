//! Run configuration. Files are TOML with one table per section; unknown keys
//! are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{BlockMode, InputFormat};
use crate::entity_init::InitStrategy;
use crate::error::{CcdError, Result};
use crate::losses::ObjectiveWeights;
use crate::model::Variant;
use crate::synthetic::SyntheticSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Ccd,
    FineTune,
    FullBatch,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ccd => "ccd",
            Method::FineTune => "fine_tune",
            Method::FullBatch => "full_batch",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = CcdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "ccd" => Ok(Method::Ccd),
            "fine_tune" | "finetune" => Ok(Method::FineTune),
            "full_batch" | "fullbatch" => Ok(Method::FullBatch),
            other => Err(CcdError::config("methods", format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub delimiter: char,
    pub user_column: usize,
    pub item_column: usize,
    pub time_column: usize,
    /// Total blocks; block 0 pretrains the teacher, blocks 1.. form the stream.
    pub num_blocks: usize,
    pub test_fraction: f64,
    pub block_mode: BlockMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        let fmt = InputFormat::default();
        Self {
            source: DataSource::Synthetic,
            path: None,
            delimiter: fmt.delimiter,
            user_column: fmt.user_column,
            item_column: fmt.item_column,
            time_column: fmt.time_column,
            num_blocks: 6,
            test_fraction: 0.2,
            block_mode: BlockMode::Count,
        }
    }
}

impl DataConfig {
    pub fn input_format(&self) -> InputFormat {
        InputFormat {
            delimiter: self.delimiter,
            user_column: self.user_column,
            item_column: self.item_column,
            time_column: self.time_column,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    #[default]
    Mf,
    GraphProp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub teacher_dim: usize,
    pub student_dim: usize,
    pub ensemble_size: usize,
    pub teacher_variant: VariantKind,
    pub student_variant: VariantKind,
    /// Propagation depth for graph_prop models.
    pub graph_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            teacher_dim: 64,
            student_dim: 8,
            ensemble_size: 3,
            teacher_variant: VariantKind::Mf,
            student_variant: VariantKind::Mf,
            graph_layers: 2,
        }
    }
}

impl ModelConfig {
    fn variant(&self, kind: VariantKind) -> Variant {
        match kind {
            VariantKind::Mf => Variant::Mf,
            VariantKind::GraphProp => Variant::GraphProp {
                layers: self.graph_layers,
            },
        }
    }

    pub fn teacher(&self) -> Variant {
        self.variant(self.teacher_variant)
    }

    pub fn student(&self) -> Variant {
        self.variant(self.student_variant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdInit {
    /// The same seeded random tables at every block.
    #[default]
    Fresh,
    /// Start from the previous block's distilled student.
    Warm,
}

/// Update cadence and optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleConfig {
    /// Student update cycles per teacher cycle.
    pub sub_cycles_per_block: usize,
    pub kd_epochs: usize,
    pub student_epochs: usize,
    pub teacher_epochs: usize,
    /// Epochs for the teacher on the pretraining block.
    pub pretrain_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Users per mini-batch.
    pub batch_users: usize,
    /// Ranked positions the distillation loss imitates.
    pub kd_list_len: usize,
    /// 0 keeps the exact full-catalog denominator; otherwise the tail below
    /// the list is replaced by this many sampled items.
    pub kd_tail_samples: usize,
    pub kd_init: KdInit,
    /// Resample replay and transfer sets every epoch (otherwise once per cycle).
    pub resample_each_epoch: bool,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            sub_cycles_per_block: 4,
            kd_epochs: 30,
            student_epochs: 10,
            teacher_epochs: 20,
            pretrain_epochs: 40,
            lr: 0.05,
            weight_decay: 1e-4,
            batch_users: 32,
            kd_list_len: 10,
            kd_tail_samples: 0,
            kd_init: KdInit::Fresh,
            resample_each_epoch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    pub w_sp: f64,
    pub w_pp: f64,
    pub epsilon: f64,
    /// Replay items per proxy per user.
    pub replay_size: usize,
    /// Transfer items per student-side model per user.
    pub transfer_size: usize,
    /// Length of the lists compared by rank disparity.
    pub top_n: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            w_sp: 0.1,
            w_pp: 0.9,
            epsilon: 0.05,
            replay_size: 3,
            transfer_size: 3,
            top_n: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub strategy: InitStrategy,
    pub prominent_fraction: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            strategy: InitStrategy::TwoHop,
            prominent_fraction: 0.05,
        }
    }
}

/// Component switches mirroring the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub disable_replay: bool,
    pub disable_sp: bool,
    pub disable_pp: bool,
    pub disable_s_to_t: bool,
    pub disable_proxies_in_s_to_t: bool,
    pub disable_annealing: bool,
    pub disable_entity_init: bool,
    pub disable_cl: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationFlag {
    Replay,
    Sp,
    Pp,
    SToT,
    ProxiesInSToT,
    Annealing,
    EntityInit,
    Cl,
}

impl AblationFlag {
    pub const ALL: [AblationFlag; 8] = [
        AblationFlag::Replay,
        AblationFlag::Sp,
        AblationFlag::Pp,
        AblationFlag::SToT,
        AblationFlag::ProxiesInSToT,
        AblationFlag::Annealing,
        AblationFlag::EntityInit,
        AblationFlag::Cl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationFlag::Replay => "disable_replay",
            AblationFlag::Sp => "disable_sp",
            AblationFlag::Pp => "disable_pp",
            AblationFlag::SToT => "disable_s_to_t",
            AblationFlag::ProxiesInSToT => "disable_proxies_in_s_to_t",
            AblationFlag::Annealing => "disable_annealing",
            AblationFlag::EntityInit => "disable_entity_init",
            AblationFlag::Cl => "disable_cl",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            AblationFlag::Replay => "w/o proxy learning",
            AblationFlag::Sp => "w/o stability proxy",
            AblationFlag::Pp => "w/o plasticity proxy",
            AblationFlag::SToT => "w/o student-side knowledge",
            AblationFlag::ProxiesInSToT => "student only",
            AblationFlag::Annealing => "w/o annealing",
            AblationFlag::EntityInit => "w/o entity initialization",
            AblationFlag::Cl => "w/o CL loss",
        }
    }

    pub fn apply(self, flags: &mut AblationFlags) {
        match self {
            AblationFlag::Replay => flags.disable_replay = true,
            AblationFlag::Sp => flags.disable_sp = true,
            AblationFlag::Pp => flags.disable_pp = true,
            AblationFlag::SToT => flags.disable_s_to_t = true,
            AblationFlag::ProxiesInSToT => flags.disable_proxies_in_s_to_t = true,
            AblationFlag::Annealing => flags.disable_annealing = true,
            AblationFlag::EntityInit => flags.disable_entity_init = true,
            AblationFlag::Cl => flags.disable_cl = true,
        }
    }
}

impl FromStr for AblationFlag {
    type Err = CcdError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        AblationFlag::ALL
            .into_iter()
            .find(|f| f.name() == s || f.name().trim_start_matches("disable_") == s)
            .ok_or_else(|| CcdError::config("flags", format!("unknown ablation flag `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Evaluate after every student sub-block as well as at block end.
    pub per_sub_block: bool,
    /// Block whose users form the dormant cohort (with the last block as the
    /// return block); 0 disables the analysis.
    pub dormant_active_block: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![10, 20],
            per_sub_block: true,
            dormant_active_block: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub cycle: CycleConfig,
    pub objective: ObjectiveWeights,
    pub proxy: ProxyConfig,
    pub init: InitConfig,
    pub ablation: AblationFlags,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            method: Method::Ccd,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            synthetic: SyntheticSpec::default(),
            model: ModelConfig::default(),
            cycle: CycleConfig::default(),
            objective: ObjectiveWeights::default(),
            proxy: ProxyConfig::default(),
            init: InitConfig::default(),
            ablation: AblationFlags::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn ensure(cond: bool, field: &str, message: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(CcdError::config(field, message))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map_or_else(|| "config".to_owned(), |s| format!("config[{}..{}]", s.start, s.end));
            CcdError::config(field, e.message().to_owned())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CcdError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        ensure(d.num_blocks >= 2, "data.num_blocks", "must be >= 2")?;
        ensure(d.test_fraction > 0.0 && d.test_fraction < 1.0, "data.test_fraction", "must lie in (0, 1)")?;
        if d.source == DataSource::File {
            ensure(d.path.is_some(), "data.path", "required when source = \"file\"")?;
        } else {
            self.synthetic.validate()?;
            ensure(
                self.synthetic.num_blocks == d.num_blocks,
                "synthetic.num_blocks",
                "must equal data.num_blocks",
            )?;
        }
        let m = &self.model;
        ensure(m.teacher_dim >= 1, "model.teacher_dim", "must be >= 1")?;
        ensure(m.student_dim >= 1, "model.student_dim", "must be >= 1")?;
        ensure(m.ensemble_size >= 1, "model.ensemble_size", "must be >= 1")?;
        let needs_layers = m.teacher_variant == VariantKind::GraphProp || m.student_variant == VariantKind::GraphProp;
        ensure(!needs_layers || m.graph_layers >= 1, "model.graph_layers", "must be >= 1 for graph_prop")?;
        let c = &self.cycle;
        ensure(c.sub_cycles_per_block >= 1, "cycle.sub_cycles_per_block", "must be >= 1")?;
        ensure(c.student_epochs >= 1, "cycle.student_epochs", "must be >= 1")?;
        ensure(c.teacher_epochs >= 1, "cycle.teacher_epochs", "must be >= 1")?;
        ensure(c.pretrain_epochs >= 1, "cycle.pretrain_epochs", "must be >= 1")?;
        ensure(c.lr > 0.0 && c.lr.is_finite(), "cycle.lr", "must be > 0")?;
        ensure(c.weight_decay >= 0.0, "cycle.weight_decay", "must be >= 0")?;
        ensure(c.batch_users >= 1, "cycle.batch_users", "must be >= 1")?;
        ensure(c.kd_list_len >= 1, "cycle.kd_list_len", "must be >= 1")?;
        self.objective.validate()?;
        let p = &self.proxy;
        ensure((0.0..1.0).contains(&p.w_sp), "proxy.w_sp", "must lie in [0, 1)")?;
        ensure(p.w_pp > 0.0 && p.w_pp <= 1.0, "proxy.w_pp", "must lie in (0, 1]")?;
        ensure(p.w_sp < p.w_pp, "proxy.w_sp", "must be smaller than proxy.w_pp")?;
        ensure(p.epsilon > 0.0 && p.epsilon.is_finite(), "proxy.epsilon", "must be > 0")?;
        ensure(p.top_n >= 1, "proxy.top_n", "must be >= 1")?;
        let i = &self.init;
        ensure(
            i.prominent_fraction > 0.0 && i.prominent_fraction <= 1.0,
            "init.prominent_fraction",
            "must lie in (0, 1]",
        )?;
        ensure(!self.eval.ks.is_empty(), "eval.ks", "needs at least one K")?;
        ensure(self.eval.ks.iter().all(|&k| k >= 1), "eval.ks", "every K must be >= 1")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn shipped_default_file_matches_defaults() {
        let text = include_str!("../../../config/default.toml");
        assert_eq!(RunConfig::from_toml(text).unwrap(), RunConfig::default());
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[proxy]\nw_sp = 0.2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.proxy.w_sp, 0.2);
        assert_eq!(cfg.proxy.w_pp, 0.9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 3\n").is_err());
        assert!(RunConfig::from_toml("[proxy]\nw_xx = 0.2\n").is_err());
    }

    #[test]
    fn proxy_weight_order_is_enforced() {
        let err = RunConfig::from_toml("[proxy]\nw_sp = 0.9\nw_pp = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("proxy.w_sp"), "{err}");
    }

    #[test]
    fn file_source_needs_path() {
        let err = RunConfig::from_toml("[data]\nsource = \"file\"\n").unwrap_err();
        assert!(err.to_string().contains("data.path"));
    }

    #[test]
    fn parses_flags_and_methods() {
        assert_eq!("disable_replay".parse::<AblationFlag>().unwrap(), AblationFlag::Replay);
        assert_eq!("s_to_t".parse::<AblationFlag>().unwrap(), AblationFlag::SToT);
        assert!("bogus".parse::<AblationFlag>().is_err());
        assert_eq!("FineTune".parse::<Method>().unwrap(), Method::FineTune);
        assert!("nope".parse::<Method>().is_err());
        assert_eq!(AblationFlag::Replay.label(), "w/o proxy learning");
    }
}

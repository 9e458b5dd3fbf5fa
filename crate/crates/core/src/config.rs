//! Run configuration files: flat `key = value` lines grouped under
//! `[section]` headers. `#` starts a comment. Unknown sections or keys and
//! unparsable values are reported with their line number.
//!
//! ```text
//! seed = 7
//! attention = focal
//!
//! [model]
//! n_layers = 4
//! grid = 8x8
//!
//! [train]
//! steps = 2000
//! ```

use std::path::Path;
use std::str::FromStr;

use crate::connectivity::AttentionKind;
use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, FewShotConfig};
use crate::layout::PatchGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub fewshot: FewShotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { experiment: ExperimentConfig::desk(), fewshot: FewShotConfig::default() }
    }
}

fn parse_grid(v: &str) -> std::result::Result<PatchGrid, String> {
    let (r, c) = match v.split_once(['x', 'X']) {
        Some((r, c)) => (r.trim(), c.trim()),
        None => (v, v),
    };
    let r: usize = r.parse().map_err(|_| format!("bad grid {v:?}"))?;
    let c: usize = c.parse().map_err(|_| format!("bad grid {v:?}"))?;
    PatchGrid::new(r, c).map_err(|e| e.to_string())
}

fn val<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: n + 1, msg };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err("unterminated section header".into()))?;
                let name = name.trim();
                if !["data", "model", "train", "eval", "fewshot"].contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(&section, key.trim(), value.trim()).map_err(err)?;
        }
        cfg.experiment.model.validate()?;
        cfg.experiment.opt.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let e = &mut self.experiment;
        let f = &mut self.fewshot;
        match (section, key) {
            ("", "seed") => e.seed = val(v)?,
            ("", "attention") => e.attention = AttentionKind::from_str(v).map_err(|err| err.to_string())?,
            ("data", "n_train") => e.n_train = val(v)?,
            ("data", "n_eval") => e.n_eval = val(v)?,
            ("data", "patch_px") => e.patch_px = val(v)?,
            ("data", "max_objects") => e.constraints.max_objects = val(v)?,
            ("data", "max_instances") => e.constraints.max_instances = val(v)?,
            ("data", "max_extra_stuff") => e.constraints.max_extra_stuff = val(v)?,
            ("data", "min_size") => e.constraints.min_size = val(v)?,
            ("data", "max_size") => e.constraints.max_size = val(v)?,
            ("data", "stuff_min_size") => e.constraints.stuff_min_size = val(v)?,
            ("data", "stuff_max_size") => e.constraints.stuff_max_size = val(v)?,
            ("model", "preset") => {
                let n = e.model.n_categories;
                e.model = match v {
                    "desk" => crate::model::ModelConfig::desk(n),
                    "tiny" => crate::model::ModelConfig::tiny(n),
                    "paper" => crate::model::ModelConfig::paper_scale(n),
                    _ => return Err(format!("unknown preset {v:?}")),
                }
            }
            ("model", "n_layers") => e.model.n_layers = val(v)?,
            ("model", "n_heads") => e.model.n_heads = val(v)?,
            ("model", "embed_dim") => e.model.embed_dim = val(v)?,
            ("model", "vocab_size") => e.model.vocab_size = val(v)?,
            ("model", "max_objects") => e.model.max_objects = val(v)?,
            ("model", "grid") => e.model.grid = parse_grid(v)?,
            ("model", "dropout") => e.model.dropout_rate = val(v)?,
            ("model", "coord_bins") => e.model.coord_bins = val(v)?,
            ("model", "init_std") => e.init_std = val(v)?,
            ("train", "lr") => e.opt.lr = val(v)?,
            ("train", "beta1") => e.opt.beta1 = val(v)?,
            ("train", "beta2") => e.opt.beta2 = val(v)?,
            ("train", "eps") => e.opt.eps = val(v)?,
            ("train", "warmup_steps") => e.opt.warmup_steps = val(v)?,
            ("train", "min_lr_ratio") => e.opt.min_lr_ratio = val(v)?,
            ("train", "steps") => e.opt.steps = val(v)?,
            ("train", "batch_size") => e.opt.batch_size = val(v)?,
            ("train", "clip_norm") => e.opt.clip_norm = val(v)?,
            ("eval", "temperature") => e.eval_temperature = val(v)?,
            ("fewshot", "novel") => f.novel = v.to_string(),
            ("fewshot", "superclass") => f.superclass = v.to_string(),
            ("fewshot", "shots") => f.shots = val(v)?,
            ("fewshot", "steps") => f.opt.steps = val(v)?,
            ("fewshot", "lr") => f.opt.lr = val(v)?,
            ("fewshot", "batch_size") => f.opt.batch_size = val(v)?,
            ("fewshot", "warmup_steps") => f.opt.warmup_steps = val(v)?,
            ("fewshot", "n_eval") => f.n_eval = val(v)?,
            ("fewshot", "seed") => f.seed = val(v)?,
            _ if section.is_empty() => return Err(format!("unknown key {key:?}")),
            _ => return Err(format!("unknown key {key:?} in [{section}]")),
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn to_text(&self) -> String {
        let e = &self.experiment;
        let f = &self.fewshot;
        let c = &e.constraints;
        let m = &e.model;
        let o = &e.opt;
        format!(
            "seed = {}\nattention = {}\n\n[data]\nn_train = {}\nn_eval = {}\npatch_px = {}\nmax_objects = {}\n\
             max_instances = {}\nmax_extra_stuff = {}\nmin_size = {}\nmax_size = {}\nstuff_min_size = {}\n\
             stuff_max_size = {}\n\n[model]\nn_layers = {}\nn_heads = {}\nembed_dim = {}\nvocab_size = {}\n\
             max_objects = {}\ngrid = {}x{}\ndropout = {}\ncoord_bins = {}\ninit_std = {}\n\n[train]\nlr = {}\n\
             beta1 = {}\nbeta2 = {}\neps = {}\nwarmup_steps = {}\nmin_lr_ratio = {}\nsteps = {}\nbatch_size = {}\n\
             clip_norm = {}\n\n[eval]\ntemperature = {}\n\n[fewshot]\nnovel = {}\nsuperclass = {}\nshots = {}\n\
             steps = {}\nlr = {}\nbatch_size = {}\nwarmup_steps = {}\nn_eval = {}\nseed = {}\n",
            e.seed,
            e.attention,
            e.n_train,
            e.n_eval,
            e.patch_px,
            c.max_objects,
            c.max_instances,
            c.max_extra_stuff,
            c.min_size,
            c.max_size,
            c.stuff_min_size,
            c.stuff_max_size,
            m.n_layers,
            m.n_heads,
            m.embed_dim,
            m.vocab_size,
            m.max_objects,
            m.grid.rows,
            m.grid.cols,
            m.dropout_rate,
            m.coord_bins,
            e.init_std,
            o.lr,
            o.beta1,
            o.beta2,
            o.eps,
            o.warmup_steps,
            o.min_lr_ratio,
            o.steps,
            o.batch_size,
            o.clip_norm,
            e.eval_temperature,
            f.novel,
            f.superclass,
            f.shots,
            f.opt.steps,
            f.opt.lr,
            f.opt.batch_size,
            f.opt.warmup_steps,
            f.n_eval,
            f.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn sections_and_comments() {
        let c = RunConfig::parse("seed = 9 # trailing\nattention = grid:4\n[model]\ngrid = 4x6\n[train]\nsteps=10\n")
            .unwrap();
        assert_eq!(c.experiment.seed, 9);
        assert_eq!(c.experiment.attention, AttentionKind::Grid(4));
        assert_eq!(c.experiment.model.grid, PatchGrid::new(4, 6).unwrap());
        assert_eq!(c.experiment.opt.steps, 10);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RunConfig::parse("seed = 1\n\n[train]\nstepz = 3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 4, .. }), "{e}");
        let e = RunConfig::parse("[bogus]\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = RunConfig::parse("seed = x\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = RunConfig::parse("[model]\nembed_dim = 30\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }
}

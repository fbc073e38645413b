//! The LPGNet model: parameter container, forward pass, and loss assembly.

pub mod fusion;
pub mod heads;
pub mod lpia;

pub use heads::{KlDirection, LossBundle, LossVars};

use crate::data::DialogueBatch;
use crate::error::{LpgError, Result};
use crate::tensor::gradcheck::ParamSet;
use crate::tensor::{Mode, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const PATH_NAMES: [&str; 4] = ["tt", "aa", "at", "ta"];

/// Experiment modes that rewire the graph without changing parameter shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// drop cross-modal paths; pair concat feeds the intra stream twice
    NoInterAttention,
    /// drop intra-modal paths; pair concat feeds the cross stream twice
    NoIntraAttention,
    /// skip the position-wise FFN term in the residual enhancement
    NoFfn,
    /// identity gates and fixed alpha = (0.5, 0.5)
    NoDualGate,
    TextOnly,
    AudioOnly,
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Ablation::None),
            "no_inter_attention" => Ok(Ablation::NoInterAttention),
            "no_intra_attention" => Ok(Ablation::NoIntraAttention),
            "no_ffn" => Ok(Ablation::NoFfn),
            "no_dual_gate" => Ok(Ablation::NoDualGate),
            "text_only" => Ok(Ablation::TextOnly),
            "audio_only" => Ok(Ablation::AudioOnly),
            _ => Err(format!("unknown ablation '{s}'")),
        }
    }
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoInterAttention => "no_inter_attention",
            Ablation::NoIntraAttention => "no_intra_attention",
            Ablation::NoFfn => "no_ffn",
            Ablation::NoDualGate => "no_dual_gate",
            Ablation::TextOnly => "text_only",
            Ablation::AudioOnly => "audio_only",
        }
    }

    pub fn unimodal(&self) -> bool {
        matches!(self, Ablation::TextOnly | Ablation::AudioOnly)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub f_t: usize,
    pub f_a: usize,
    pub classes: usize,
    pub hidden: usize,
    /// feedforward width; 2d by default
    pub d_ff: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub tau: f64,
    pub lambda_task: f64,
    pub lambda_ce: f64,
    pub lambda_kl: f64,
    pub kl_direction: KlDirection,
    /// distillation heads exist only when enabled; inference builds skip them
    pub enable_students: bool,
    pub ablation: Ablation,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn desk(f_t: usize, f_a: usize, classes: usize, hidden: usize) -> Self {
        ModelConfig {
            f_t,
            f_a,
            classes,
            hidden,
            d_ff: 2 * hidden,
            dropout: 0.1,
            leaky_slope: 0.01,
            tau: 1.0,
            lambda_task: 1.5,
            lambda_ce: 1.0,
            lambda_kl: 0.3,
            kl_direction: KlDirection::StudentTeacher,
            enable_students: true,
            ablation: Ablation::None,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
        }
    }

    pub fn no_ffn(&self) -> bool {
        self.ablation == Ablation::NoFfn
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(LpgError::contract("need at least 2 classes".to_string()));
        }
        if self.d_ff != 2 * self.hidden && self.d_ff != 4 * self.hidden {
            return Err(LpgError::contract(format!(
                "d_ff {} must be 2d or 4d for d = {}",
                self.d_ff, self.hidden
            )));
        }
        if self.tau <= 0.0 {
            return Err(LpgError::contract(format!("tau {} must be positive", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    fn new(m: usize, n: usize, rng: &mut impl Rng) -> Self {
        LinearParams {
            w: Tensor::randn(vec![m, n], 1.0 / (m as f64).sqrt(), rng),
            b: {
                let mut t = Tensor::zeros(vec![n]);
                t.requires_grad = true;
                t
            },
        }
    }
}

/// One attention path's enhancement stack (compression, norms, feedforward).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnhanceParams {
    pub comp: LinearParams,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl EnhanceParams {
    fn new(d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        let ones = |n: usize| {
            let mut t = Tensor::full(vec![n], 1.0);
            t.requires_grad = true;
            t
        };
        let zeros = |n: usize| {
            let mut t = Tensor::zeros(vec![n]);
            t.requires_grad = true;
            t
        };
        EnhanceParams {
            comp: LinearParams::new(d, d, rng),
            bn_gamma: ones(d),
            bn_beta: zeros(d),
            bn_running_mean: vec![0.0; d],
            bn_running_var: vec![1.0; d],
            ln_gamma: ones(d),
            ln_beta: zeros(d),
            w1: Tensor::randn(vec![d, d_ff], 1.0 / (d as f64).sqrt(), rng),
            w2: Tensor::randn(vec![d_ff, d], 1.0 / (d_ff as f64).sqrt(), rng),
        }
    }
}

/// Every learnable weight, addressable by a canonical dotted name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LpgNetParams {
    pub proj_t: LinearParams,
    pub proj_a: LinearParams,
    /// order: tt, aa, at, ta
    pub paths: Vec<EnhanceParams>,
    /// gate weights in path order
    pub gates: Vec<Tensor>,
    pub pair_t: LinearParams,
    pub pair_a: LinearParams,
    pub score_w: Tensor,
    pub head: LinearParams,
    pub student_t: LinearParams,
    pub student_a: LinearParams,
}

impl LpgNetParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden;
        LpgNetParams {
            proj_t: LinearParams::new(cfg.f_t, d, &mut rng),
            proj_a: LinearParams::new(cfg.f_a, d, &mut rng),
            paths: (0..4).map(|_| EnhanceParams::new(d, cfg.d_ff, &mut rng)).collect(),
            gates: (0..4)
                .map(|_| Tensor::randn(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng))
                .collect(),
            pair_t: LinearParams::new(2 * d, d, &mut rng),
            pair_a: LinearParams::new(2 * d, d, &mut rng),
            score_w: Tensor::randn(vec![d, 1], 1.0 / (d as f64).sqrt(), &mut rng),
            head: LinearParams::new(d, cfg.classes, &mut rng),
            student_t: LinearParams::new(d, cfg.classes, &mut rng),
            student_a: LinearParams::new(d, cfg.classes, &mut rng),
        }
    }

    /// Learnable tensors in canonical order. `with_students` controls whether
    /// the distillation heads appear.
    pub fn entries(&self, with_students: bool) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("proj.t.w".into(), &self.proj_t.w),
            ("proj.t.b".into(), &self.proj_t.b),
            ("proj.a.w".into(), &self.proj_a.w),
            ("proj.a.b".into(), &self.proj_a.b),
        ];
        for (i, p) in self.paths.iter().enumerate() {
            let n = PATH_NAMES[i];
            out.push((format!("lpia.{n}.comp.w"), &p.comp.w));
            out.push((format!("lpia.{n}.comp.b"), &p.comp.b));
            out.push((format!("lpia.{n}.bn.gamma"), &p.bn_gamma));
            out.push((format!("lpia.{n}.bn.beta"), &p.bn_beta));
            out.push((format!("lpia.{n}.ln.gamma"), &p.ln_gamma));
            out.push((format!("lpia.{n}.ln.beta"), &p.ln_beta));
            out.push((format!("lpia.{n}.ffn.w1"), &p.w1));
            out.push((format!("lpia.{n}.ffn.w2"), &p.w2));
        }
        for (i, g) in self.gates.iter().enumerate() {
            out.push((format!("fusion.gate.{}.w", PATH_NAMES[i]), g));
        }
        out.push(("fusion.pair.t.w".into(), &self.pair_t.w));
        out.push(("fusion.pair.t.b".into(), &self.pair_t.b));
        out.push(("fusion.pair.a.w".into(), &self.pair_a.w));
        out.push(("fusion.pair.a.b".into(), &self.pair_a.b));
        out.push(("fusion.score.w".into(), &self.score_w));
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        if with_students {
            out.push(("student.t.w".into(), &self.student_t.w));
            out.push(("student.t.b".into(), &self.student_t.b));
            out.push(("student.a.w".into(), &self.student_a.w));
            out.push(("student.a.b".into(), &self.student_a.b));
        }
        out
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let path_idx = |n: &str| PATH_NAMES.iter().position(|p| *p == n);
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["proj", "t", "w"] => Some(&mut self.proj_t.w),
            ["proj", "t", "b"] => Some(&mut self.proj_t.b),
            ["proj", "a", "w"] => Some(&mut self.proj_a.w),
            ["proj", "a", "b"] => Some(&mut self.proj_a.b),
            ["lpia", p, rest @ ..] => {
                let i = path_idx(p)?;
                let path = &mut self.paths[i];
                match rest {
                    ["comp", "w"] => Some(&mut path.comp.w),
                    ["comp", "b"] => Some(&mut path.comp.b),
                    ["bn", "gamma"] => Some(&mut path.bn_gamma),
                    ["bn", "beta"] => Some(&mut path.bn_beta),
                    ["ln", "gamma"] => Some(&mut path.ln_gamma),
                    ["ln", "beta"] => Some(&mut path.ln_beta),
                    ["ffn", "w1"] => Some(&mut path.w1),
                    ["ffn", "w2"] => Some(&mut path.w2),
                    _ => None,
                }
            }
            ["fusion", "gate", p, "w"] => {
                let i = path_idx(p)?;
                Some(&mut self.gates[i])
            }
            ["fusion", "pair", "t", "w"] => Some(&mut self.pair_t.w),
            ["fusion", "pair", "t", "b"] => Some(&mut self.pair_t.b),
            ["fusion", "pair", "a", "w"] => Some(&mut self.pair_a.w),
            ["fusion", "pair", "a", "b"] => Some(&mut self.pair_a.b),
            ["fusion", "score", "w"] => Some(&mut self.score_w),
            ["head", "w"] => Some(&mut self.head.w),
            ["head", "b"] => Some(&mut self.head.b),
            ["student", "t", "w"] => Some(&mut self.student_t.w),
            ["student", "t", "b"] => Some(&mut self.student_t.b),
            ["student", "a", "w"] => Some(&mut self.student_a.w),
            ["student", "a", "b"] => Some(&mut self.student_a.b),
            _ => None,
        }
    }

    pub fn zero_grads(&mut self, with_students: bool) {
        let names: Vec<String> =
            self.entries(with_students).into_iter().map(|(n, _)| n).collect();
        for n in names {
            if let Some(t) = self.entry_mut(&n) {
                t.zero_grad();
            }
        }
    }
}

/// Tape handles for one path's enhancement parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundEnhance {
    pub comp_w: Var,
    pub comp_b: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub w1: Var,
    pub w2: Var,
}

/// Tape handles for every learnable tensor bound this step.
pub struct BoundParams {
    pub by_name: Vec<(String, Var)>,
    pub proj_t: (Var, Var),
    pub proj_a: (Var, Var),
    pub paths: Vec<BoundEnhance>,
    pub gates: [Var; 4],
    pub pair_t: (Var, Var),
    pub pair_a: (Var, Var),
    pub score_w: Var,
    pub head: (Var, Var),
    pub student_t: (Var, Var),
    pub student_a: (Var, Var),
}

/// Model outputs of one forward pass, as tape handles.
pub struct ForwardOutput {
    pub logits: Var,
    pub probs: Var,
    pub t_fused: Option<Var>,
    pub a_fused: Option<Var>,
    pub alpha_t: Option<Var>,
    pub alpha_a: Option<Var>,
    pub f_final: Var,
    pub paths: Vec<Option<Var>>,
}

pub struct StepOutput {
    pub bound: BoundParams,
    pub out: ForwardOutput,
    pub loss: Option<LossVars>,
    pub bundle: Option<LossBundle>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LpgNet {
    pub config: ModelConfig,
    pub params: LpgNetParams,
}

impl LpgNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = LpgNetParams::init(&config, seed);
        Ok(LpgNet { config, params })
    }

    fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut by_name = Vec::new();
        let mut bind_one = |tape: &mut Tape, name: String, t: &Tensor| -> Var {
            let v = tape.leaf(t);
            by_name.push((name, v));
            v
        };
        let p = &self.params;
        let proj_t = (
            bind_one(tape, "proj.t.w".into(), &p.proj_t.w),
            bind_one(tape, "proj.t.b".into(), &p.proj_t.b),
        );
        let proj_a = (
            bind_one(tape, "proj.a.w".into(), &p.proj_a.w),
            bind_one(tape, "proj.a.b".into(), &p.proj_a.b),
        );
        let paths: Vec<BoundEnhance> = p
            .paths
            .iter()
            .enumerate()
            .map(|(i, ep)| {
                let n = PATH_NAMES[i];
                BoundEnhance {
                    comp_w: bind_one(tape, format!("lpia.{n}.comp.w"), &ep.comp.w),
                    comp_b: bind_one(tape, format!("lpia.{n}.comp.b"), &ep.comp.b),
                    bn_gamma: bind_one(tape, format!("lpia.{n}.bn.gamma"), &ep.bn_gamma),
                    bn_beta: bind_one(tape, format!("lpia.{n}.bn.beta"), &ep.bn_beta),
                    ln_gamma: bind_one(tape, format!("lpia.{n}.ln.gamma"), &ep.ln_gamma),
                    ln_beta: bind_one(tape, format!("lpia.{n}.ln.beta"), &ep.ln_beta),
                    w1: bind_one(tape, format!("lpia.{n}.ffn.w1"), &ep.w1),
                    w2: bind_one(tape, format!("lpia.{n}.ffn.w2"), &ep.w2),
                }
            })
            .collect();
        let gates: Vec<Var> = p
            .gates
            .iter()
            .enumerate()
            .map(|(i, g)| bind_one(tape, format!("fusion.gate.{}.w", PATH_NAMES[i]), g))
            .collect();
        let pair_t = (
            bind_one(tape, "fusion.pair.t.w".into(), &p.pair_t.w),
            bind_one(tape, "fusion.pair.t.b".into(), &p.pair_t.b),
        );
        let pair_a = (
            bind_one(tape, "fusion.pair.a.w".into(), &p.pair_a.w),
            bind_one(tape, "fusion.pair.a.b".into(), &p.pair_a.b),
        );
        let score_w = bind_one(tape, "fusion.score.w".into(), &p.score_w);
        let head = (
            bind_one(tape, "head.w".into(), &p.head.w),
            bind_one(tape, "head.b".into(), &p.head.b),
        );
        let student_t = (
            bind_one(tape, "student.t.w".into(), &p.student_t.w),
            bind_one(tape, "student.t.b".into(), &p.student_t.b),
        );
        let student_a = (
            bind_one(tape, "student.a.w".into(), &p.student_a.w),
            bind_one(tape, "student.a.b".into(), &p.student_a.b),
        );
        BoundParams {
            by_name,
            proj_t,
            proj_a,
            paths,
            gates: [gates[0], gates[1], gates[2], gates[3]],
            pair_t,
            pair_a,
            score_w,
            head,
            student_t,
            student_a,
        }
    }

    /// Forward pass. In train mode batch-norm running stats are updated.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        batch: &DialogueBatch,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(BoundParams, ForwardOutput)> {
        let bound = self.bind(tape);
        let cfg = self.config.clone();
        let abl = cfg.ablation;
        let mask = batch.mask.data.clone();

        let x_t_in = tape.leaf(&batch.text_feats);
        let x_a_in = tape.leaf(&batch.audio_feats);

        let use_text = abl != Ablation::AudioOnly;
        let use_audio = abl != Ablation::TextOnly;
        let x_t = if use_text {
            Some(lpia::project_conv1d(tape, x_t_in, bound.proj_t.0, bound.proj_t.1)?)
        } else {
            None
        };
        let x_a = if use_audio {
            Some(lpia::project_conv1d(tape, x_a_in, bound.proj_a.0, bound.proj_a.1)?)
        } else {
            None
        };

        let intra = abl != Ablation::NoIntraAttention;
        let inter = abl != Ablation::NoInterAttention && !abl.unimodal();
        // path plan: (query, key/value) streams in tt, aa, at, ta order
        let plan: [Option<(Var, Var)>; 4] = [
            if use_text && intra { Some((x_t.unwrap(), x_t.unwrap())) } else { None },
            if use_audio && intra { Some((x_a.unwrap(), x_a.unwrap())) } else { None },
            if inter { Some((x_a.unwrap(), x_t.unwrap())) } else { None },
            if inter { Some((x_t.unwrap(), x_a.unwrap())) } else { None },
        ];
        let mut path_out: Vec<Option<Var>> = vec![None; 4];
        let mut bn_updates: Vec<(usize, lpia::BnBatchStats)> = Vec::new();
        for (i, spec) in plan.iter().enumerate() {
            if let Some((q, kv)) = spec {
                let (_, attn) = lpia::masked_attention(tape, *q, *kv, *kv, &mask)?;
                let ep = &self.params.paths[i];
                let (enhanced, stats) = lpia::enhance(
                    tape,
                    *q,
                    attn,
                    &bound.paths[i],
                    &ep.bn_running_mean,
                    &ep.bn_running_var,
                    &mask,
                    mode,
                    &cfg,
                    rng,
                )?;
                path_out[i] = Some(enhanced);
                if let Some(s) = stats {
                    bn_updates.push((i, s));
                }
            }
        }
        for (i, stats) in bn_updates {
            let ep = &mut self.params.paths[i];
            let m = cfg.bn_momentum;
            let b = batch.batch as f64;
            for j in 0..ep.bn_running_mean.len() {
                ep.bn_running_mean[j] = (1.0 - m) * ep.bn_running_mean[j] + m * stats.mean[j];
                // unbiased variance for the running estimate
                let unbiased = stats.var[j] * b / (b - 1.0);
                ep.bn_running_var[j] = (1.0 - m) * ep.bn_running_var[j] + m * unbiased;
            }
        }

        let gate_identity = abl == Ablation::NoDualGate;
        let (t_fused, a_fused, alpha_t, alpha_a, f_final) = match abl {
            Ablation::TextOnly => {
                let x_tt = path_out[0].expect("text path");
                let h_t = if gate_identity {
                    x_tt
                } else {
                    fusion::gated_fusion(tape, x_tt, bound.gates[0])?
                };
                let cat = tape.concat_last(h_t, h_t)?;
                let t_fused = tape.linear(cat, bound.pair_t.0, Some(bound.pair_t.1))?;
                (Some(t_fused), None, None, None, t_fused)
            }
            Ablation::AudioOnly => {
                let x_aa = path_out[1].expect("audio path");
                let h_a = if gate_identity {
                    x_aa
                } else {
                    fusion::gated_fusion(tape, x_aa, bound.gates[1])?
                };
                let cat = tape.concat_last(h_a, h_a)?;
                let a_fused = tape.linear(cat, bound.pair_a.0, Some(bound.pair_a.1))?;
                (None, Some(a_fused), None, None, a_fused)
            }
            _ => {
                // a dropped stream's pair slot is fed by the surviving stream
                // of the same modality pair, so shapes are preserved
                let x_tt = path_out[0].or(path_out[2]).expect("text-pair path");
                let x_aa = path_out[1].or(path_out[3]).expect("audio-pair path");
                let x_at = path_out[2].or(path_out[0]).expect("text-pair path");
                let x_ta = path_out[3].or(path_out[1]).expect("audio-pair path");
                let (t_fused, a_fused) = fusion::unimodal_fuse(
                    tape,
                    x_tt,
                    x_at,
                    x_aa,
                    x_ta,
                    &bound.gates,
                    bound.pair_t,
                    bound.pair_a,
                    gate_identity,
                )?;
                let (at, aa, f_final) = fusion::multimodal_fuse(
                    tape,
                    t_fused,
                    a_fused,
                    bound.score_w,
                    gate_identity,
                )?;
                (Some(t_fused), Some(a_fused), Some(at), Some(aa), f_final)
            }
        };

        let (logits, probs) = heads::classify(tape, f_final, bound.head.0, bound.head.1)?;
        Ok((
            bound,
            ForwardOutput {
                logits,
                probs,
                t_fused,
                a_fused,
                alpha_t,
                alpha_a,
                f_final,
                paths: path_out,
            },
        ))
    }

    /// Forward plus the weighted loss assembly.
    pub fn forward_loss(
        &mut self,
        tape: &mut Tape,
        batch: &DialogueBatch,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<StepOutput> {
        self.forward_loss_with_teacher(tape, batch, mode, rng, None)
    }

    /// As `forward_loss`, but the distillation teacher distribution can be
    /// pinned to an externally computed one. Finite-difference checks need
    /// this: the teacher is detached from the gradient, so the function being
    /// differentiated must hold it constant too.
    pub fn forward_loss_with_teacher(
        &mut self,
        tape: &mut Tape,
        batch: &DialogueBatch,
        mode: Mode,
        rng: &mut impl Rng,
        teacher_override: Option<&[f64]>,
    ) -> Result<StepOutput> {
        let (bound, out) = self.forward(tape, batch, mode, rng)?;
        let cfg = self.config.clone();
        let classes = cfg.classes;
        let task = heads::task_loss(tape, out.logits, &batch.labels, classes)?;

        let students_active = cfg.enable_students && !cfg.ablation.unimodal();
        let (ce_t, kl_t, ce_a, kl_a) = if students_active {
            let teacher_soft = match teacher_override {
                Some(t) => t.to_vec(),
                None => heads::teacher_soft_detached(tape, out.logits, cfg.tau, classes),
            };
            let one = |tape: &mut Tape, h: Var, head: (Var, Var)| -> Result<(Var, Var)> {
                let (s_logits, _s_probs, _s_soft) =
                    heads::student_forward(tape, h, head.0, head.1, cfg.tau)?;
                let ce = heads::task_loss(tape, s_logits, &batch.labels, classes)?;
                let kl = heads::distill_kl(
                    tape,
                    s_logits,
                    &teacher_soft,
                    cfg.tau,
                    &batch.labels,
                    classes,
                    cfg.kl_direction,
                )?;
                Ok((ce, kl))
            };
            let (ce_t, kl_t) = one(tape, out.t_fused.expect("t_fused"), bound.student_t)?;
            let (ce_a, kl_a) = one(tape, out.a_fused.expect("a_fused"), bound.student_a)?;
            (Some(ce_t), Some(kl_t), Some(ce_a), Some(kl_a))
        } else {
            (None, None, None, None)
        };

        let lambdas = (cfg.lambda_task, cfg.lambda_ce, cfg.lambda_kl);
        let total =
            heads::total_loss(tape, task, &[(ce_t, kl_t), (ce_a, kl_a)], lambdas)?;
        let val = |v: Option<Var>| v.map(|v| tape.data(v)[0]).unwrap_or(0.0);
        let bundle = LossBundle {
            task: tape.data(task)[0],
            ce_t: val(ce_t),
            ce_a: val(ce_a),
            kl_t: val(kl_t),
            kl_a: val(kl_a),
            total: tape.data(total)[0],
            lambdas,
        };
        Ok(StepOutput {
            bound,
            out,
            loss: Some(LossVars { task, ce_t, ce_a, kl_t, kl_a, total }),
            bundle: Some(bundle),
        })
    }

    /// Copies tape gradients back into the parameter tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        for (name, var) in &bound.by_name {
            if let Some(t) = self.params.entry_mut(name) {
                let g = tape.grad(*var).to_vec();
                t.accumulate_grad(&g);
            }
        }
    }

    /// Tape gradients keyed by parameter name.
    pub fn grads_by_name(&self, tape: &Tape, bound: &BoundParams) -> HashMap<String, Vec<f64>> {
        bound
            .by_name
            .iter()
            .map(|(n, v)| (n.clone(), tape.grad(*v).to_vec()))
            .collect()
    }

    /// Exact learnable-scalar counts grouped by dotted name prefix.
    pub fn param_count(&self) -> ParamCount {
        param_count_of(&self.params.entries(self.config.enable_students))
    }

    /// Parameters of the LPIA block alone (4 paths with enhancement).
    pub fn lpia_block_param_count(&self) -> usize {
        self.params
            .entries(false)
            .iter()
            .filter(|(n, _)| n.starts_with("lpia."))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub groups: Vec<(String, usize)>,
}

pub fn param_count_of(entries: &[(String, &Tensor)]) -> ParamCount {
    let mut groups: Vec<(String, usize)> = Vec::new();
    let mut total = 0usize;
    for (name, t) in entries {
        let key: String = name.split('.').take(2).collect::<Vec<_>>().join(".");
        total += t.numel();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, c)) => *c += t.numel(),
            None => groups.push((key, t.numel())),
        }
    }
    ParamCount { total, groups }
}

impl ParamSet for LpgNet {
    fn param_names(&self) -> Vec<String> {
        self.params
            .entries(self.config.enable_students)
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    fn param(&self, name: &str) -> &Tensor {
        // entries() borrows immutably; find the matching reference
        let entries = self.params.entries(true);
        entries
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .expect("unknown parameter")
    }

    fn param_mut(&mut self, name: &str) -> &mut Tensor {
        self.params.entry_mut(name).expect("unknown parameter")
    }
}

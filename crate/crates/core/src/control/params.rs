use crate::dit::{BlockParams, DiTConfig, Init, Linear, INIT_STD};
use crate::error::{dim_err, Result};
use crate::tensor::{normal_tensor, ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

/// A factorized linear map `x·A·B (+ b)` with `A: [in×r]`, `B: [r×out]`.
///
/// The effective weight `A·B` has rank at most `r` and the layer holds
/// `r·(in + out)` weights.
#[derive(Clone, Debug)]
pub struct LowRankLinear {
    pub down: ParamId,
    pub up: ParamId,
    pub bias: Option<ParamId>,
}

impl LowRankLinear {
    /// Registers `{name}.down`, `{name}.up` and optionally `{name}.b`.
    /// `down` is always `N(0, 0.02²)`; `up` follows `up_init`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        (fan_in, fan_out): (usize, usize),
        rank: usize,
        bias: bool,
        up_init: Init,
    ) -> Self {
        let down = store.add(format!("{name}.down"), normal_tensor(rng, &[fan_in, rank], INIT_STD), true);
        let up_value = match up_init {
            Init::Normal => normal_tensor(rng, &[rank, fan_out], INIT_STD),
            Init::FanIn => normal_tensor(rng, &[rank, fan_out], (rank as f64).recip().sqrt()),
            Init::Zero => Tensor::zeros(&[rank, fan_out]),
        };
        let up = store.add(format!("{name}.up"), up_value, true);
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), true));
        LowRankLinear { down, up, bias }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = tape.param(store, self.down)?;
        let b = tape.param(store, self.up)?;
        let h = tape.matmul(x, a)?;
        let y = tape.matmul(h, b)?;
        match self.bias {
            Some(bias) => {
                let bias = tape.param(store, bias)?;
                tape.add_row(y, bias)
            }
            None => Ok(y),
        }
    }

    /// The dense `[in × out]` product `A·B`.
    pub fn materialize<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        store.value(self.down).matmul(store.value(self.up))
    }

    pub fn rank(&self, store: &ParamStore<impl Scalar>) -> usize {
        store.value(self.down).shape()[1]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        [self.down, self.up].into_iter().chain(self.bias)
    }
}

/// Maps a condition image to `C_h = LN(L₂(GELU(L₁(patchify(c)))))`, one token
/// per image-token position. `L₁` and `L₂` are rank-`rank_embed` factorized
/// layers with biases; the layer norm has a learned affine.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    pub embed: LowRankLinear,
    pub proj: LowRankLinear,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
}

impl ConditionEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &DiTConfig, prefix: &str) -> Self {
        let d = cfg.d_model;
        let embed = LowRankLinear::new(
            store,
            rng,
            &format!("{prefix}.embed"),
            (cfg.patch_dim(), d),
            cfg.rank_embed,
            true,
            Init::Normal,
        );
        let proj =
            LowRankLinear::new(store, rng, &format!("{prefix}.proj"), (d, d), cfg.rank_embed, true, Init::Normal);
        let norm_gamma = store.add(format!("{prefix}.norm.gamma"), Tensor::ones(&[d]), true);
        let norm_beta = store.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[d]), true);
        ConditionEncoder { embed, proj, norm_gamma, norm_beta }
    }

    /// Encodes patchified condition tokens `[N × C·p²]` into `C_h: [N × d]`.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, cond_tokens: Var) -> Result<Var> {
        let expected = store.value(self.embed.down).shape()[0];
        if tape.shape(cond_tokens).get(1) != Some(&expected) {
            return dim_err(format!(
                "condition tokens {:?} do not match patch width {expected}",
                tape.shape(cond_tokens)
            ));
        }
        let h = self.embed.apply(tape, store, cond_tokens)?;
        let h = tape.gelu(h)?;
        let h = self.proj.apply(tape, store, h)?;
        let g = tape.param(store, self.norm_gamma)?;
        let b = tape.param(store, self.norm_beta)?;
        tape.layer_norm(h, Some(g), Some(b))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        self.embed.ids().chain(self.proj.ids()).chain([self.norm_gamma, self.norm_beta])
    }
}

/// LoRA adapters applied to condition rows of one block's image stream.
#[derive(Clone, Debug)]
pub struct UnifiedLora {
    pub q: LowRankLinear,
    pub k: LowRankLinear,
    pub v: LowRankLinear,
    pub o: LowRankLinear,
    pub mlp_in: LowRankLinear,
    pub mlp_out: LowRankLinear,
}

impl UnifiedLora {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &DiTConfig, prefix: &str) -> Self {
        let (d, h, r) = (cfg.d_model, cfg.mlp_hidden(), cfg.unified_lora_rank);
        let mut lora =
            |name: &str, dims| LowRankLinear::new(store, rng, &format!("{prefix}.{name}"), dims, r, false, Init::Zero);
        UnifiedLora {
            q: lora("q", (d, d)),
            k: lora("k", (d, d)),
            v: lora("v", (d, d)),
            o: lora("o", (d, d)),
            mlp_in: lora("mlp_in", (d, h)),
            mlp_out: lora("mlp_out", (h, d)),
        }
    }
}

/// Trainable state of the selected scheme. All names start with `control.`.
#[derive(Clone, Debug)]
pub enum ControlParams {
    None,
    /// Shared encoder plus one `(K, V)` low-rank pair per block.
    Side {
        encoder: ConditionEncoder,
        kv: Vec<(LowRankLinear, LowRankLinear)>,
    },
    /// Copies of the first blocks, the input fusion `Z₁` and one output fusion `Z₂` per copy.
    ControlNetDup {
        z1: Linear,
        copies: Vec<BlockParams>,
        z2: Vec<Linear>,
    },
    /// One LoRA set per block.
    Unified {
        lora: Vec<UnifiedLora>,
    },
}

use super::layers::{Init, Linear};
use super::{grid_position_features, patchify, timestep_features, unpatchify, DiTConfig};
use crate::control::{
    cond_kv, kv_augmented_attention, ConditionEncoder, ControlParams, ControlScheme, LowRankLinear, UnifiedLora,
};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{normal_tensor, seeded, split_seed, ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

use super::layers::INIT_STD;

/// Weights of one token stream (text or image) inside a block.
#[derive(Clone, Debug)]
pub struct StreamParams {
    /// `d → 6d`: shift, scale and gate for attention, then for the MLP.
    pub modulation: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl StreamParams {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        cfg: &DiTConfig,
        prefix: &str,
        trainable: bool,
    ) -> Self {
        let (d, h) = (cfg.d_model, cfg.mlp_hidden());
        let mut lin =
            |name: &str, dims, init| Linear::new(store, rng, &format!("{prefix}.{name}"), dims, true, init, trainable);
        StreamParams {
            modulation: lin("mod", (d, 6 * d), Init::Zero),
            q: lin("q", (d, d), Init::FanIn),
            k: lin("k", (d, d), Init::FanIn),
            v: lin("v", (d, d), Init::FanIn),
            o: lin("o", (d, d), Init::FanIn),
            mlp_in: lin("mlp_in", (d, h), Init::FanIn),
            mlp_out: lin("mlp_out", (h, d), Init::FanIn),
        }
    }

    fn linears(&self) -> [&Linear; 7] {
        [&self.modulation, &self.q, &self.k, &self.v, &self.o, &self.mlp_in, &self.mlp_out]
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.linears().iter().flat_map(|l| l.ids()).collect()
    }
}

/// A joint-attention block with separate text and image weights.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub txt: StreamParams,
    pub img: StreamParams,
}

impl BlockParams {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        cfg: &DiTConfig,
        prefix: &str,
        trainable: bool,
    ) -> Self {
        BlockParams {
            txt: StreamParams::new(store, rng, cfg, &format!("{prefix}.txt"), trainable),
            img: StreamParams::new(store, rng, cfg, &format!("{prefix}.img"), trainable),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.txt.ids();
        ids.extend(self.img.ids());
        ids
    }
}

/// The backbone. Every name starts with `backbone.`.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch_embed: Linear,
    /// Learned absolute position of every image token, `[N × d]`, initialized
    /// from [`grid_position_features`].
    pub pos_embed: ParamId,
    /// `M` rows per class label plus `M` rows for the null label.
    pub text_table: ParamId,
    /// Learned slot embedding of the `M` text positions.
    pub text_slot: ParamId,
    pub time_in: Linear,
    pub time_out: Linear,
    pub blocks: Vec<BlockParams>,
    /// `d → 2d`: shift and scale before the output projection.
    pub final_mod: Linear,
    pub final_out: Linear,
}

impl Backbone {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &DiTConfig, trainable: bool) -> Self {
        let (d, m) = (cfg.d_model, cfg.text_tokens);
        let lin = |store: &mut ParamStore<T>, rng: &mut Rng, name: &str, dims, init| {
            Linear::new(store, rng, &format!("backbone.{name}"), dims, true, init, trainable)
        };
        let patch_embed = lin(store, rng, "patch_embed", (cfg.patch_dim(), d), Init::FanIn);
        let pos_embed = store.add("backbone.pos_embed", grid_position_features(cfg), trainable);
        let text_table =
            store.add("backbone.text_table", normal_tensor(rng, &[(cfg.n_classes + 1) * m, d], INIT_STD), trainable);
        let text_slot = store.add("backbone.text_slot", normal_tensor(rng, &[m, d], INIT_STD), trainable);
        let time_in = lin(store, rng, "time_in", (d, d), Init::FanIn);
        let time_out = lin(store, rng, "time_out", (d, d), Init::FanIn);
        let blocks = (0..cfg.n_blocks)
            .map(|i| BlockParams::new(store, rng, cfg, &format!("backbone.blocks.{i}"), trainable))
            .collect();
        let final_mod = lin(store, rng, "final.mod", (d, 2 * d), Init::Zero);
        let final_out = lin(store, rng, "final.out", (d, cfg.patch_dim()), Init::Zero);
        Backbone { patch_embed, pos_embed, text_table, text_slot, time_in, time_out, blocks, final_mod, final_out }
    }
}

/// Inputs of one velocity evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ForwardInput<'a, T> {
    /// Noisy image `x_t`, `[C×H×W]`.
    pub noisy: &'a Tensor<T>,
    pub t: f64,
    /// Class label selecting the text tokens.
    pub label: usize,
    /// Use the null label instead of `label`.
    pub drop_text: bool,
    pub cond: Option<&'a Tensor<T>>,
    /// Skip the control branch even when a condition is present.
    pub drop_cond: bool,
}

impl<'a, T> ForwardInput<'a, T> {
    pub fn new(noisy: &'a Tensor<T>, t: f64, label: usize) -> Self {
        ForwardInput { noisy, t, label, drop_text: false, cond: None, drop_cond: false }
    }

    pub fn with_cond(mut self, cond: &'a Tensor<T>) -> Self {
        self.cond = Some(cond);
        self
    }
}

/// What one block did, for inspection.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    /// The attention node whose weights are recorded (the joint one).
    pub attention: Var,
    /// Condition-side input the block's K/V branch read, if any.
    pub side: Option<Var>,
    /// Rows of the image stream inside the block (`N`, or `N + P` for `unified_seq`).
    pub image_rows: usize,
    /// Block output streams.
    pub txt_out: Var,
    pub img_out: Var,
}

/// Result of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// Predicted velocity as patch tokens, `[N × C·p²]`.
    pub out: Var,
    /// Encoded condition `C_h` for the side-branch schemes.
    pub cond_features: Option<Var>,
    pub blocks: Vec<BlockTrace>,
}

enum Injection<'a> {
    None,
    Kv { k_c: Var, v_c: Var },
    Additive { k_c: Var, v_c: Var },
    Lora { lora: &'a UnifiedLora, n_cond: usize },
}

/// A backbone together with the control branch of one scheme.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: DiTConfig,
    pub scheme: ControlScheme,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub control: ControlParams,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model. The backbone is trainable only for
    /// `ControlScheme::None`; otherwise it is frozen and only `control.*`
    /// parameters train. Backbone and control weights use independent
    /// streams derived from `seed`.
    pub fn new(config: DiTConfig, scheme: ControlScheme, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng_b = seeded(split_seed(seed, 0));
        let mut rng_c = seeded(split_seed(seed, 1));
        let backbone = Backbone::new(&mut store, &mut rng_b, &config, scheme == ControlScheme::None);
        let control = build_control(&mut store, &mut rng_c, &config, scheme, &backbone);
        let mut model = Model { config, scheme, store, backbone, control };
        model.sync_copies();
        Ok(model)
    }

    /// Replaces every `backbone.*` weight by the same-named weight of `source`
    /// and re-seeds duplicated blocks from it.
    pub fn adopt_backbone(&mut self, source: &ParamStore<T>) -> Result<()> {
        let ids: Vec<ParamId> =
            self.store.iter().filter(|(_, p)| p.name.starts_with("backbone.")).map(|(id, _)| id).collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            let Some(src) = source.id(&name) else {
                return contract_err(format!("source has no parameter `{name}`"));
            };
            let value = source.value(src);
            if value.shape() != self.store.value(id).shape() {
                return dim_err(format!(
                    "`{name}`: source shape {:?} vs {:?}",
                    value.shape(),
                    self.store.value(id).shape()
                ));
            }
            self.store.get_mut(id).value = value.clone();
        }
        self.sync_copies();
        Ok(())
    }

    fn sync_copies(&mut self) {
        if let ControlParams::ControlNetDup { copies, .. } = &self.control {
            for (j, copy) in copies.iter().enumerate() {
                for (dst, src) in copy.ids().into_iter().zip(self.backbone.blocks[j].ids()) {
                    self.store.get_mut(dst).value = self.store.value(src).clone();
                }
            }
        }
    }

    /// The same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            scheme: self.scheme,
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            control: self.control.clone(),
        }
    }

    pub fn backbone_checksum(&self) -> String {
        self.store.checksum("backbone.")
    }

    pub fn control_param_count(&self) -> usize {
        self.store.count_prefix("control.")
    }

    /// Records the forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, input: &ForwardInput<T>) -> Result<Forward> {
        let cfg = &self.config;
        let shape = cfg.image_shape();
        if input.noisy.shape() != shape {
            return dim_err(format!("noisy image {:?} does not match model input {shape:?}", input.noisy.shape()));
        }
        if !input.drop_text && input.label >= cfg.n_classes {
            return contract_err(format!("label {} out of range for {} classes", input.label, cfg.n_classes));
        }
        let cond = match (self.scheme, input.cond) {
            (ControlScheme::None, Some(_)) => return contract_err("scheme `none` takes no condition image"),
            (ControlScheme::None, None) => None,
            (_, _) if input.drop_cond => None,
            (s, None) => return contract_err(format!("scheme `{s}` needs a condition image unless it is dropped")),
            (_, Some(c)) => {
                if c.shape() != shape {
                    return dim_err(format!("condition image {:?} does not match model input {shape:?}", c.shape()));
                }
                Some(c)
            }
        };

        let bb = &self.backbone;
        let st = &self.store;
        let (m, n) = (cfg.text_tokens, cfg.n_tokens());

        let tokens = tape.constant(patchify(input.noisy, cfg.patch_size)?)?;
        let pos = tape.param(st, bb.pos_embed)?;
        let x = bb.patch_embed.apply(tape, st, tokens)?;
        let mut img = tape.add(x, pos)?;

        let row = if input.drop_text { cfg.n_classes } else { input.label };
        let table = tape.param(st, bb.text_table)?;
        let text = tape.slice_rows(table, row * m, m)?;
        let slot = tape.param(st, bb.text_slot)?;
        let mut txt = tape.add(text, slot)?;

        let feats = tape.constant(timestep_features(input.t, cfg.d_model))?;
        let c = bb.time_in.apply(tape, st, feats)?;
        let c = tape.silu(c)?;
        let c = bb.time_out.apply(tape, st, c)?;
        let cmod = tape.silu(c)?;

        let mut cond_features = None;
        let mut side = None;
        let mut residuals = Vec::new();
        let mut n_cond = 0;
        if let Some(cond) = cond {
            let cond_tokens = tape.constant(patchify(cond, cfg.patch_size)?)?;
            match &self.control {
                ControlParams::Side { encoder, .. } => {
                    let c_h = encoder.encode(tape, st, cond_tokens)?;
                    cond_features = Some(c_h);
                    side = Some(tape.add(c_h, pos)?);
                }
                ControlParams::ControlNetDup { z1, copies, z2 } => {
                    let fused = z1.apply(tape, st, cond_tokens)?;
                    let mut copy_img = tape.add(img, fused)?;
                    let mut copy_txt = txt;
                    for (copy, z) in copies.iter().zip(z2) {
                        let (t2, i2, _) = self.block(tape, copy, cmod, copy_txt, copy_img, Injection::None)?;
                        copy_txt = t2;
                        copy_img = i2;
                        residuals.push(z.apply(tape, st, copy_img)?);
                    }
                }
                ControlParams::Unified { .. } => {
                    let e = bb.patch_embed.apply(tape, st, cond_tokens)?;
                    let e = tape.add(e, pos)?;
                    n_cond = n;
                    img = tape.concat_rows(&[img, e])?;
                }
                ControlParams::None => {}
            }
        }

        let mut traces = Vec::with_capacity(cfg.n_blocks);
        for (i, bp) in bb.blocks.iter().enumerate() {
            let mut block_side = None;
            let injection = match (&self.control, side) {
                (ControlParams::Side { kv, .. }, Some(s)) => {
                    let (kp, vp) = &kv[i];
                    let (k_c, v_c) = cond_kv(tape, st, s, kp, vp)?;
                    block_side = Some(s);
                    if self.scheme == ControlScheme::LayerByLayer {
                        side = Some(tape.add(s, v_c)?);
                    }
                    if self.scheme == ControlScheme::Additive {
                        Injection::Additive { k_c, v_c }
                    } else {
                        Injection::Kv { k_c, v_c }
                    }
                }
                (ControlParams::Unified { lora }, _) if n_cond > 0 => Injection::Lora { lora: &lora[i], n_cond },
                _ => Injection::None,
            };
            let (t2, mut i2, attention) = self.block(tape, bp, cmod, txt, img, injection)?;
            if let Some(r) = residuals.get(i) {
                i2 = tape.add(i2, *r)?;
            }
            traces.push(BlockTrace {
                attention,
                side: block_side,
                image_rows: tape.shape(i2)[0],
                txt_out: t2,
                img_out: i2,
            });
            txt = t2;
            img = i2;
        }

        if n_cond > 0 {
            img = tape.slice_rows(img, 0, n)?;
        }
        let mods = bb.final_mod.apply(tape, st, cmod)?;
        let d = cfg.d_model;
        let shift = tape.slice_cols(mods, 0, d)?;
        let scale = tape.slice_cols(mods, d, d)?;
        let h = modulate(tape, img, shift, scale)?;
        let out = bb.final_out.apply(tape, st, h)?;
        Ok(Forward { out, cond_features, blocks: traces })
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        bp: &BlockParams,
        cmod: Var,
        txt: Var,
        img: Var,
        injection: Injection<'_>,
    ) -> Result<(Var, Var, Var)> {
        let st = &self.store;
        let d = self.config.d_model;
        let m = tape.shape(txt)[0];
        let rows_img = tape.shape(img)[0];
        let lora = match &injection {
            Injection::Lora { lora, n_cond } => Some((*lora, *n_cond)),
            _ => None,
        };
        let lr = |sel: fn(&UnifiedLora) -> &LowRankLinear| lora.map(|(l, n)| (sel(l), n));

        let tm = StreamMods::new(tape, st, &bp.txt, cmod, d)?;
        let im = StreamMods::new(tape, st, &bp.img, cmod, d)?;

        let ht = modulate(tape, txt, tm.shift1, tm.scale1)?;
        let hi = modulate(tape, img, im.shift1, im.scale1)?;
        let qt = bp.txt.q.apply(tape, st, ht)?;
        let kt = bp.txt.k.apply(tape, st, ht)?;
        let vt = bp.txt.v.apply(tape, st, ht)?;
        let qi = lora_linear(tape, st, &bp.img.q, hi, lr(|l| &l.q))?;
        let ki = lora_linear(tape, st, &bp.img.k, hi, lr(|l| &l.k))?;
        let vi = lora_linear(tape, st, &bp.img.v, hi, lr(|l| &l.v))?;
        let q = tape.concat_rows(&[qt, qi])?;
        let k = tape.concat_rows(&[kt, ki])?;
        let v = tape.concat_rows(&[vt, vi])?;

        let heads = self.config.n_heads;
        let (attn, recorded) = match injection {
            Injection::Kv { k_c, v_c } => {
                let a = kv_augmented_attention(tape, q, k, v, k_c, v_c, heads, false)?;
                (a, a)
            }
            Injection::Additive { k_c, v_c } => {
                let main = tape.attention(q, k, v, heads, None)?;
                let side = tape.attention(q, k_c, v_c, heads, None)?;
                (tape.add(main, side)?, main)
            }
            Injection::None | Injection::Lora { .. } => {
                let a = tape.attention(q, k, v, heads, None)?;
                (a, a)
            }
        };

        let at = tape.slice_rows(attn, 0, m)?;
        let ai = tape.slice_rows(attn, m, rows_img)?;
        let ot = bp.txt.o.apply(tape, st, at)?;
        let oi = lora_linear(tape, st, &bp.img.o, ai, lr(|l| &l.o))?;
        let txt = gated_add(tape, txt, ot, tm.gate1)?;
        let img = gated_add(tape, img, oi, im.gate1)?;

        let ht = modulate(tape, txt, tm.shift2, tm.scale2)?;
        let hi = modulate(tape, img, im.shift2, im.scale2)?;
        let ft = bp.txt.mlp_in.apply(tape, st, ht)?;
        let ft = tape.gelu(ft)?;
        let ft = bp.txt.mlp_out.apply(tape, st, ft)?;
        let fi = lora_linear(tape, st, &bp.img.mlp_in, hi, lr(|l| &l.mlp_in))?;
        let fi = tape.gelu(fi)?;
        let fi = lora_linear(tape, st, &bp.img.mlp_out, fi, lr(|l| &l.mlp_out))?;
        let txt = gated_add(tape, txt, ft, tm.gate2)?;
        let img = gated_add(tape, img, fi, im.gate2)?;
        Ok((txt, img, recorded))
    }

    /// Predicted velocity as an image `[C×H×W]`.
    pub fn velocity(&self, input: &ForwardInput<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, input)?;
        unpatchify(tape.value(f.out), self.config.patch_size, self.config.image_shape())
    }

    /// Mean squared error between the predicted velocity and `target` (`[C×H×W]`).
    pub fn loss(&self, tape: &mut Tape<T>, input: &ForwardInput<T>, target: &Tensor<T>) -> Result<Var> {
        let f = self.forward(tape, input)?;
        let target = tape.constant(patchify(target, self.config.patch_size)?)?;
        tape.mse(f.out, target)
    }
}

struct StreamMods {
    shift1: Var,
    scale1: Var,
    gate1: Var,
    shift2: Var,
    scale2: Var,
    gate2: Var,
}

impl StreamMods {
    fn new<T: Scalar>(tape: &mut Tape<T>, st: &ParamStore<T>, sp: &StreamParams, cmod: Var, d: usize) -> Result<Self> {
        let mods = sp.modulation.apply(tape, st, cmod)?;
        let mut part = |i: usize| tape.slice_cols(mods, i * d, d);
        Ok(StreamMods {
            shift1: part(0)?,
            scale1: part(1)?,
            gate1: part(2)?,
            shift2: part(3)?,
            scale2: part(4)?,
            gate2: part(5)?,
        })
    }
}

/// `LN(x)·(1 + scale) + shift`.
fn modulate<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = tape.layer_norm(x, None, None)?;
    let s = tape.add_const(scale, T::one())?;
    let h = tape.mul_row(h, s)?;
    tape.add_row(h, shift)
}

fn gated_add<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, gate: Var) -> Result<Var> {
    let g = tape.mul_row(y, gate)?;
    tape.add(x, g)
}

/// `lin(x)`, plus `lora(x_c)` on the last `n` rows when an adapter is given.
fn lora_linear<T: Scalar>(
    tape: &mut Tape<T>,
    st: &ParamStore<T>,
    lin: &Linear,
    x: Var,
    lora: Option<(&LowRankLinear, usize)>,
) -> Result<Var> {
    let y = lin.apply(tape, st, x)?;
    let Some((adapter, n)) = lora else {
        return Ok(y);
    };
    let rows = tape.shape(x)[0];
    let xc = tape.slice_rows(x, rows - n, n)?;
    let delta = adapter.apply(tape, st, xc)?;
    let main = tape.slice_rows(y, 0, rows - n)?;
    let yc = tape.slice_rows(y, rows - n, n)?;
    let yc = tape.add(yc, delta)?;
    tape.concat_rows(&[main, yc])
}

fn build_control<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    cfg: &DiTConfig,
    scheme: ControlScheme,
    backbone: &Backbone,
) -> ControlParams {
    let d = cfg.d_model;
    match scheme {
        ControlScheme::None => ControlParams::None,
        ControlScheme::NanoControl | ControlScheme::Additive | ControlScheme::LayerByLayer => {
            let encoder = ConditionEncoder::new(store, rng, cfg, "control.encoder");
            let kv = (0..cfg.n_blocks)
                .map(|i| {
                    let k = LowRankLinear::new(
                        store,
                        rng,
                        &format!("control.blocks.{i}.k"),
                        (d, d),
                        cfg.rank_kv,
                        false,
                        Init::Normal,
                    );
                    let v = LowRankLinear::new(
                        store,
                        rng,
                        &format!("control.blocks.{i}.v"),
                        (d, d),
                        cfg.rank_kv,
                        false,
                        Init::Normal,
                    );
                    (k, v)
                })
                .collect();
            ControlParams::Side { encoder, kv }
        }
        ControlScheme::ControlNetDup => {
            let z1 = Linear::new(store, rng, "control.z1", (cfg.patch_dim(), d), true, Init::Zero, true);
            let depth = cfg.controlnet_depth();
            debug_assert!(depth <= backbone.blocks.len());
            let copies =
                (0..depth).map(|j| BlockParams::new(store, rng, cfg, &format!("control.copy.{j}"), true)).collect();
            let z2 = (0..depth)
                .map(|j| Linear::new(store, rng, &format!("control.z2.{j}"), (d, d), true, Init::Zero, true))
                .collect();
            ControlParams::ControlNetDup { z1, copies, z2 }
        }
        ControlScheme::UnifiedSeq => ControlParams::Unified {
            lora: (0..cfg.n_blocks).map(|i| UnifiedLora::new(store, rng, cfg, &format!("control.lora.{i}"))).collect(),
        },
    }
}

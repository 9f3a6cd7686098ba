use super::LowRankLinear;
use crate::error::{dim_err, Result};
use crate::tensor::{ParamStore, Scalar, Tape, Var};

/// Condition keys and values `K_c = side·A_K·B_K`, `V_c = side·A_V·B_V`.
pub fn cond_kv<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    side: Var,
    k: &LowRankLinear,
    v: &LowRankLinear,
) -> Result<(Var, Var)> {
    Ok((k.apply(tape, store, side)?, v.apply(tape, store, side)?))
}

/// Attention whose queries are the backbone tokens and whose keys/values are
/// the backbone's followed by the condition's: `Attn(Q, [K; K_c], [V; V_c])`.
///
/// With `mask_condition` every condition key gets zero weight, which reduces
/// to plain `Attn(Q, K, V)`. The output has as many rows as `q`.
#[allow(clippy::too_many_arguments)]
pub fn kv_augmented_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    k_c: Var,
    v_c: Var,
    heads: usize,
    mask_condition: bool,
) -> Result<Var> {
    let (s, p) = (tape.shape(k)[0], tape.shape(k_c)[0]);
    if tape.shape(v_c)[0] != p {
        return dim_err(format!("condition keys ({p}) and values ({}) differ in count", tape.shape(v_c)[0]));
    }
    let keys = tape.concat_rows(&[k, k_c])?;
    let values = tape.concat_rows(&[v, v_c])?;
    if mask_condition && p > 0 {
        let mask: Vec<bool> = (0..s + p).map(|i| i >= s).collect();
        tape.attention(q, keys, values, heads, Some(&mask))
    } else {
        tape.attention(q, keys, values, heads, None)
    }
}

/// `Attn(Q, K, V) + Attn(Q, K_c, V_c)`: the condition is attended to in a
/// separate softmax and added to the backbone's attention output.
pub fn additive_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    k_c: Var,
    v_c: Var,
    heads: usize,
) -> Result<Var> {
    let main = tape.attention(q, k, v, heads, None)?;
    let side = tape.attention(q, k_c, v_c, heads, None)?;
    tape.add(main, side)
}

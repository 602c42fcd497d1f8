use std::collections::BTreeMap;
use std::sync::Arc;

use indexmap::IndexMap;

use super::{ModelConfig, SegModel, LN_EPS};
use crate::autograd::{NdArray, Scalar, Tape, Var};
use crate::error::{Error, Result};

/// A recorded forward pass: the tape plus handles to the logits, the
/// exported skip states, and every parameter leaf.
pub struct ForwardPass<F: Scalar> {
    pub tape: Tape<F>,
    /// `[num_classes, H, W, D]`
    pub logits: Var,
    /// skip layer index → `n×d` patch-token state fed to the decoder.
    pub skips: BTreeMap<usize, Var>,
    pub param_vars: IndexMap<String, Var>,
}

/// Flat index map realizing non-overlapping K³ patch extraction.
///
/// Token order is lexicographic over the (z, y, x) patch grid; within a
/// token, features are ordered channel-major, then local (z, y, x) offset.
fn patch_indices(cfg: &ModelConfig) -> Vec<usize> {
    let k = cfg.patch;
    let [s0, s1, s2] = cfg.spatial;
    let g = cfg.grid();
    let mut idx = Vec::with_capacity(cfg.token_count() * cfg.patch_features());
    for gz in 0..g[0] {
        for gy in 0..g[1] {
            for gx in 0..g[2] {
                for c in 0..cfg.in_channels {
                    for lz in 0..k {
                        for ly in 0..k {
                            for lx in 0..k {
                                let z = gz * k + lz;
                                let y = gy * k + ly;
                                let x = gx * k + lx;
                                idx.push(((c * s0 + z) * s1 + y) * s2 + x);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Index map reshaping `n×d` tokens into a `d×g0×g1×g2` feature volume,
/// inverting the token order used by `patch_indices`.
fn tokens_to_volume_indices(n: usize, d: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * d);
    for ch in 0..d {
        for t in 0..n {
            idx.push(t * d + ch);
        }
    }
    idx
}

impl<F: Scalar> SegModel<F> {
    /// Run the full forward pass, recording every operation on a fresh tape.
    ///
    /// With `train == true`, parameters flagged learnable become
    /// gradient-tracked leaves; everything else enters the tape frozen.
    pub fn forward(&self, volume: &NdArray<F>, train: bool) -> Result<ForwardPass<F>> {
        let cfg = &self.config;
        let expected = [
            cfg.in_channels,
            cfg.spatial[0],
            cfg.spatial[1],
            cfg.spatial[2],
        ];
        if volume.shape() != expected {
            return Err(Error::Dimension(format!(
                "input volume shape {:?} does not match config {:?}",
                volume.shape(),
                expected
            )));
        }

        let mut tape = Tape::new();
        let mut pv: IndexMap<String, Var> = IndexMap::new();
        for (name, p) in self.params() {
            pv.insert(
                name.to_string(),
                tape.leaf(p.value.clone(), train && p.learnable),
            );
        }
        let p = |name: &str| -> Var { pv[name] };

        let n = cfg.token_count();
        let _d = cfg.embed_dim;

        // Eq-style pipeline: embed, prepend prompts, L encoder layers,
        // export patch-token skip states, decode.
        let x = tape.constant(volume.clone());
        let patches = tape.gather(
            x,
            Arc::new(patch_indices(cfg)),
            vec![n, cfg.patch_features()],
        )?;
        let proj = tape.matmul(patches, p("embed.w"))?;
        let proj = tape.add_bias_row(proj, p("embed.b"))?;
        let mut seq = tape.add(proj, p("embed.pos"))?;

        let sites = self.prompt.active_sites();
        let mut skips: BTreeMap<usize, Var> = BTreeMap::new();
        for i in 1..=cfg.layers {
            if sites.contains(&i) {
                // fresh prompts replace any previous prompt rows; patch
                // tokens are always the last n rows
                let rows = tape.value(seq).shape()[0];
                let patch_tokens = if rows > n {
                    tape.slice_rows(seq, rows - n, n)?
                } else {
                    seq
                };
                seq = tape.concat_rows(&[p(&format!("prompt.{i}")), patch_tokens])?;
            }
            seq = encoder_layer(&mut tape, &pv, cfg, i, seq)?;
            if cfg.skip_layers.contains(&i) {
                let rows = tape.value(seq).shape()[0];
                skips.insert(i, tape.slice_rows(seq, rows - n, n)?);
            }
        }

        let logits = decode(&mut tape, &pv, self, &skips)?;
        Ok(ForwardPass {
            tape,
            logits,
            skips,
            param_vars: pv,
        })
    }
}

impl<F: Scalar> SegModel<F> {
    /// Embedded patch tokens `x_0 = proj(patches) + pos` without running the
    /// encoder. Used for inspection and tests.
    pub fn patch_tokens(&self, volume: &NdArray<F>) -> Result<NdArray<F>> {
        let cfg = &self.config;
        let mut tape: Tape<F> = Tape::new();
        let x = tape.constant(volume.clone());
        let patches = tape.gather(
            x,
            Arc::new(patch_indices(cfg)),
            vec![cfg.token_count(), cfg.patch_features()],
        )?;
        let w = tape.constant(self.param("embed.w").value.clone());
        let b = tape.constant(self.param("embed.b").value.clone());
        let pos = tape.constant(self.param("embed.pos").value.clone());
        let proj = tape.matmul(patches, w)?;
        let proj = tape.add_bias_row(proj, b)?;
        let tokens = tape.add(proj, pos)?;
        Ok(tape.value(tokens).clone())
    }
}

/// Pre-norm transformer block: `seq + MSA(LN(seq))`, then `+ MLP(LN(·))`.
/// Every token (prompt or patch) attends to every token.
fn encoder_layer<F: Scalar>(
    tape: &mut Tape<F>,
    pv: &IndexMap<String, Var>,
    cfg: &ModelConfig,
    i: usize,
    seq: Var,
) -> Result<Var> {
    let p = |name: String| -> Var { pv[&name] };
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let eps = F::of_f64(LN_EPS);

    let normed = tape.layer_norm(seq, p(format!("enc.{i}.ln1.g")), p(format!("enc.{i}.ln1.b")), eps)?;
    let q = tape.matmul(normed, p(format!("enc.{i}.msa.wq")))?;
    let q = tape.add_bias_row(q, p(format!("enc.{i}.msa.bq")))?;
    let k = tape.matmul(normed, p(format!("enc.{i}.msa.wk")))?;
    let k = tape.add_bias_row(k, p(format!("enc.{i}.msa.bk")))?;
    let v = tape.matmul(normed, p(format!("enc.{i}.msa.wv")))?;
    let v = tape.add_bias_row(v, p(format!("enc.{i}.msa.bv")))?;

    // scaled dot-product attention, scale 1/sqrt(d/heads)
    let scale = F::of_f64(1.0 / (dh as f64).sqrt());
    let mut head_outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores)?;
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let concat = tape.concat_cols(&head_outs)?;
    let proj = tape.matmul(concat, p(format!("enc.{i}.msa.wo")))?;
    let proj = tape.add_bias_row(proj, p(format!("enc.{i}.msa.bo")))?;
    let seq = tape.add(seq, proj)?;

    let normed = tape.layer_norm(seq, p(format!("enc.{i}.ln2.g")), p(format!("enc.{i}.ln2.b")), eps)?;
    let h1 = tape.matmul(normed, p(format!("enc.{i}.mlp.w1")))?;
    let h1 = tape.add_bias_row(h1, p(format!("enc.{i}.mlp.b1")))?;
    let act = tape.gelu(h1);
    let h2 = tape.matmul(act, p(format!("enc.{i}.mlp.w2")))?;
    let h2 = tape.add_bias_row(h2, p(format!("enc.{i}.mlp.b2")))?;
    let _ = d;
    tape.add(seq, h2)
}

/// UNETR-style decoder. The deepest skip state is progressively upsampled
/// by stride-2 transpose convolutions, merged channel-wise with the
/// upsampled shallower skip states (deep → shallow), refined per stage,
/// upsampled to full resolution, and mapped to classes by a 1³ head.
fn decode<F: Scalar>(
    tape: &mut Tape<F>,
    pv: &IndexMap<String, Var>,
    model: &SegModel<F>,
    skips: &BTreeMap<usize, Var>,
) -> Result<Var> {
    let cfg = &model.config;
    let plan = model.plan();
    let g = cfg.grid();
    let n = cfg.token_count();
    let d = cfg.embed_dim;
    let p = |name: String| -> Var { pv[&name] };

    for &layer in &cfg.skip_layers {
        if !skips.contains_key(&layer) {
            return Err(Error::Contract(format!("missing skip state for layer {layer}")));
        }
    }

    let to_volume = |tape: &mut Tape<F>, tokens: Var| -> Result<Var> {
        let idx = Arc::new(tokens_to_volume_indices(n, d));
        tape.gather(tokens, idx, vec![d, g[0], g[1], g[2]])
    };

    let deepest = skips[cfg.skip_layers.last().unwrap()];
    let mut main = to_volume(tape, deepest)?;

    for st in &plan.stages {
        let j = st.index;
        main = if st.stride == 2 {
            tape.conv_transpose3d(main, p(format!("dec.{j}.up.w")), p(format!("dec.{j}.up.b")), 2)?
        } else {
            tape.conv3d(main, p(format!("dec.{j}.up.w")), p(format!("dec.{j}.up.b")), 1, 1)?
        };
        let mut skip = to_volume(tape, skips[&st.skip_layer])?;
        if st.skip_doublings == 0 {
            skip = tape.conv3d(skip, p(format!("dec.{j}.skip.0.w")), p(format!("dec.{j}.skip.0.b")), 1, 0)?;
        } else {
            for t in 0..st.skip_doublings {
                skip = tape.conv_transpose3d(
                    skip,
                    p(format!("dec.{j}.skip.{t}.w")),
                    p(format!("dec.{j}.skip.{t}.b")),
                    2,
                )?;
            }
        }
        let merged = concat_channels(tape, main, skip)?;
        main = tape.conv3d(merged, p(format!("dec.{j}.fuse.w")), p(format!("dec.{j}.fuse.b")), 1, 1)?;
    }

    for t in 0..plan.leftover.len() {
        main = tape.conv_transpose3d(main, p(format!("dec.up.{t}.w")), p(format!("dec.up.{t}.b")), 2)?;
    }

    let refined = tape.conv3d(main, p("dec.final.w".into()), p("dec.final.b".into()), 1, 1)?;
    tape.conv3d(refined, p("head.w".into()), p("head.b".into()), 1, 0)
}

/// Channel-wise concat of two `[C, D, H, W]` volumes via reshape to 2D rows.
fn concat_channels<F: Scalar>(tape: &mut Tape<F>, a: Var, b: Var) -> Result<Var> {
    let sa = tape.value(a).shape().to_vec();
    let sb = tape.value(b).shape().to_vec();
    if sa[1..] != sb[1..] {
        return Err(Error::Dimension(format!(
            "channel concat spatial mismatch: {:?} vs {:?}",
            sa, sb
        )));
    }
    let sp = sa[1] * sa[2] * sa[3];
    let a2 = tape.reshape(a, vec![sa[0], sp])?;
    let b2 = tape.reshape(b, vec![sb[0], sp])?;
    let cat = tape.concat_rows(&[a2, b2])?;
    tape.reshape(cat, vec![sa[0] + sb[0], sa[1], sa[2], sa[3]])
}

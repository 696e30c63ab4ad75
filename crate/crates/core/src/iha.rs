//! Interleaved-head attention: per head, P pseudo-queries/keys/values are
//! learned linear combinations of all heads' projections, placed into a
//! virtual sequence of length N*P, attended, then collapsed back to H head
//! outputs by a linear map over the H*P pseudo outputs.
//!
//! Two virtual-token orderings are supported: `Interleaved` puts pseudo p of
//! position n at index n*P + p (the kernel-friendly layout), `PseudoMajor`
//! at p*N + n (the algebraic formulation used by the theorem constructions).
//! Without positional encodings the collapsed outputs agree; with rotary
//! positions each virtual index gets its own phase and they diverge.

use crate::attention::{
    head_attention, rotary_positions, AttentionConfig, HeadBank, MhaParams, Positional, ScoreMode,
};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{self, contract, Mask, Tensor};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordering {
    Interleaved,
    PseudoMajor,
}

#[derive(Debug, Clone, Copy)]
pub enum MixTarget {
    Query,
    Key,
    Value,
}

/// Full IHA parameter set: base projections plus mixing tensors and the
/// general collapse map R in R^{H x (H*P)}. The algorithmic R in R^{H x P}
/// is the block-diagonal restriction; see [`block_diag_collapse`].
#[derive(Debug, Clone)]
pub struct IhaParams {
    pub base: MhaParams,
    /// Mixing tensors indexed (source head m, target head h, pseudo j).
    pub alpha_q: Tensor,
    pub alpha_k: Tensor,
    pub alpha_v: Tensor,
    /// Collapse map, H x (H*P); column h'*P + j reads pseudo j of head h'.
    pub collapse: Tensor,
}

impl IhaParams {
    pub fn heads(&self) -> usize {
        self.base.heads.heads()
    }

    pub fn pseudo(&self) -> usize {
        self.alpha_q.shape()[2]
    }

    pub fn random(heads: usize, d_model: usize, head_dim: usize, pseudo: usize, rng: &mut CounterRng) -> Self {
        let base = MhaParams::random(heads, d_model, head_dim, rng);
        let mut t = |shape: &[usize], rng: &mut CounterRng| Tensor::from_fn(shape, |_| rng.normal() * 0.5);
        IhaParams {
            base,
            alpha_q: t(&[heads, heads, pseudo], rng),
            alpha_k: t(&[heads, heads, pseudo], rng),
            alpha_v: t(&[heads, heads, pseudo], rng),
            collapse: t(&[heads, heads * pseudo], rng),
        }
    }

    pub fn validate(&self, d_model: usize, head_dim: usize) -> Result<()> {
        self.base.validate(d_model, head_dim)?;
        let h = self.heads();
        let p = self.pseudo();
        for (name, a) in [("alpha_q", &self.alpha_q), ("alpha_k", &self.alpha_k), ("alpha_v", &self.alpha_v)] {
            if a.shape() != [h, h, p] {
                return Err(Error::InvalidConfig(format!(
                    "{name} shape {:?}, expected [{h}, {h}, {p}]",
                    a.shape()
                )));
            }
        }
        if self.collapse.shape() != [h, h * p] {
            return Err(Error::InvalidConfig(format!(
                "collapse shape {:?}, expected [{h}, {}]",
                self.collapse.shape(),
                h * p
            )));
        }
        Ok(())
    }

    /// Number of parameters added on top of the base projections:
    /// 3*H^2*P from the mixing tensors plus H^2*P from the collapse map.
    pub fn mixing_param_count(&self) -> usize {
        self.alpha_q.numel() + self.alpha_k.numel() + self.alpha_v.numel() + self.collapse.numel()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut items: Vec<(String, &Tensor)> = Vec::new();
        for (m, w) in self.base.heads.wq.iter().enumerate() {
            items.push((format!("wq.{m}"), w));
        }
        for (m, w) in self.base.heads.wk.iter().enumerate() {
            items.push((format!("wk.{m}"), w));
        }
        for (m, w) in self.base.heads.wv.iter().enumerate() {
            items.push((format!("wv.{m}"), w));
        }
        items.push(("wo".into(), &self.base.wo));
        items.push(("alpha_q".into(), &self.alpha_q));
        items.push(("alpha_k".into(), &self.alpha_k));
        items.push(("alpha_v".into(), &self.alpha_v));
        items.push(("collapse".into(), &self.collapse));
        let borrowed: Vec<(&str, &Tensor)> = items.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        save_named_tensors(path, &borrowed)
    }

    pub fn load(path: &Path) -> Result<IhaParams> {
        let items = load_named_tensors(path)?;
        let lookup = |name: &str| -> Result<Tensor> {
            items
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Other(format!("missing tensor `{name}` in container")))
        };
        let heads = items.iter().filter(|(n, _)| n.starts_with("wq.")).count();
        if heads == 0 {
            return Err(Error::Other("container holds no per-head projections".into()));
        }
        let collect = |prefix: &str| -> Result<Vec<Tensor>> {
            (0..heads).map(|m| lookup(&format!("{prefix}.{m}"))).collect()
        };
        Ok(IhaParams {
            base: MhaParams {
                heads: HeadBank {
                    wq: collect("wq")?,
                    wk: collect("wk")?,
                    wv: collect("wv")?,
                },
                wo: lookup("wo")?,
            },
            alpha_q: lookup("alpha_q")?,
            alpha_k: lookup("alpha_k")?,
            alpha_v: lookup("alpha_v")?,
            collapse: lookup("collapse")?,
        })
    }
}

/// Rectangular variant used by the theorem constructions: a head bank plus
/// mixing/collapse tensors, with no output projection.
#[derive(Debug, Clone)]
pub struct IhaBank {
    pub base: HeadBank,
    pub alpha_q: Tensor,
    pub alpha_k: Tensor,
    pub alpha_v: Tensor,
    pub collapse: Tensor,
}

impl IhaBank {
    pub fn entry_count(&self) -> usize {
        self.base.entry_count()
            + self.alpha_q.numel()
            + self.alpha_k.numel()
            + self.alpha_v.numel()
            + self.collapse.numel()
    }

    /// Per-head collapsed outputs with no mask and no positional encoding.
    pub fn attend(&self, x: &Tensor, mode: ScoreMode, ordering: Ordering) -> Result<Vec<Tensor>> {
        mixed_bank_attend(
            x,
            &self.base,
            &self.alpha_q,
            &self.alpha_k,
            &self.alpha_v,
            &self.collapse,
            mode,
            None,
            Positional::None,
            ordering,
        )
    }
}

/// Expand an algorithmic collapse R in R^{H x P} into the general
/// H x (H*P) form where head h reads only its own pseudo block.
pub fn block_diag_collapse(r: &Tensor) -> Result<Tensor> {
    if r.shape().len() != 2 {
        return Err(Error::InvalidShape {
            shape: r.shape().to_vec(),
            reason: "block_diag_collapse expects [H, P]".into(),
        });
    }
    let (h, p) = (r.shape()[0], r.shape()[1]);
    let mut out = Tensor::zeros(&[h, h * p]);
    for i in 0..h {
        for j in 0..p {
            out.set(&[i, i * p + j], r.at(&[i, j]));
        }
    }
    Ok(out)
}

/// One-hot collapse that selects pseudo 1 of each head's own block.
pub fn select_first_pseudo_collapse(heads: usize, pseudo: usize) -> Tensor {
    let mut r = Tensor::zeros(&[heads, pseudo]);
    for i in 0..heads {
        r.set(&[i, 0], 1.0);
    }
    block_diag_collapse(&r).expect("shape is valid")
}

/// Mix per-head projections of x into pseudo-heads:
/// entry (h, j) = sum_m alpha[m,h,j] * (x W^(m)), shape [H, P, N, d].
pub fn mix_projections(x: &Tensor, ws: &[Tensor], alpha: &Tensor) -> Result<Tensor> {
    let h = ws.len();
    if alpha.shape().len() != 3 || alpha.shape()[0] != h || alpha.shape()[1] != h {
        return Err(Error::InvalidConfig(format!(
            "alpha shape {:?} inconsistent with {} heads",
            alpha.shape(),
            h
        )));
    }
    let n = x.rows();
    let d = ws[0].cols();
    let mut packed = Tensor::zeros(&[n, h, d]);
    for (m, w) in ws.iter().enumerate() {
        let proj = tensor::matmul(x, w)?;
        for i in 0..n {
            for c in 0..d {
                packed.set(&[i, m, c], proj.at(&[i, c]));
            }
        }
    }
    contract("mhp,nmd->hpnd", &[alpha, &packed])
}

/// Spec-level mixing entry point over full IHA parameters.
pub fn mix_pseudo(x: &Tensor, params: &IhaParams, which: MixTarget) -> Result<Tensor> {
    let (ws, alpha) = match which {
        MixTarget::Query => (&params.base.heads.wq, &params.alpha_q),
        MixTarget::Key => (&params.base.heads.wk, &params.alpha_k),
        MixTarget::Value => (&params.base.heads.wv, &params.alpha_v),
    };
    mix_projections(x, ws, alpha)
}

/// Interleave the pseudo axis into the sequence axis: virtual token
/// n*P + p is pseudo p of original position n.
pub fn merge_interleaved(t: &Tensor) -> Result<Tensor> {
    let [h, p, n, d] = four_dims(t)?;
    let mut out = Tensor::zeros(&[h, n * p, d]);
    for hh in 0..h {
        for pp in 0..p {
            for nn in 0..n {
                for c in 0..d {
                    out.set(&[hh, nn * p + pp, c], t.at(&[hh, pp, nn, c]));
                }
            }
        }
    }
    Ok(out)
}

pub fn unmerge_interleaved(t: &Tensor, n: usize, p: usize) -> Result<Tensor> {
    let [h, l, d] = three_dims(t)?;
    if l != n * p {
        return Err(Error::shape("unmerge_interleaved", &[n * p], &[l]));
    }
    let mut out = Tensor::zeros(&[h, p, n, d]);
    for hh in 0..h {
        for nn in 0..n {
            for pp in 0..p {
                for c in 0..d {
                    out.set(&[hh, pp, nn, c], t.at(&[hh, nn * p + pp, c]));
                }
            }
        }
    }
    Ok(out)
}

/// Row-wise concatenation of the pseudo blocks: virtual token p*N + n is
/// pseudo p of position n. A pure reshape under the [H,P,N,d] layout.
pub fn stack_pseudo_major(t: &Tensor) -> Result<Tensor> {
    let [h, p, n, d] = four_dims(t)?;
    t.reshape(&[h, p * n, d])
}

pub fn unstack_pseudo_major(t: &Tensor, n: usize, p: usize) -> Result<Tensor> {
    let [h, l, d] = three_dims(t)?;
    if l != n * p {
        return Err(Error::shape("unstack_pseudo_major", &[n * p], &[l]));
    }
    t.reshape(&[h, p, n, d])
}

fn four_dims(t: &Tensor) -> Result<[usize; 4]> {
    if t.shape().len() != 4 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "expected [H, P, N, d]".into(),
        });
    }
    Ok([t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]])
}

fn three_dims(t: &Tensor) -> Result<[usize; 3]> {
    if t.shape().len() != 3 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "expected [H, L, d]".into(),
        });
    }
    Ok([t.shape()[0], t.shape()[1], t.shape()[2]])
}

fn head_block(t: &Tensor, h: usize) -> Tensor {
    let inner: usize = t.shape()[1..].iter().product();
    Tensor::new(
        t.shape()[1..].to_vec(),
        t.data()[h * inner..(h + 1) * inner].to_vec(),
    )
    .expect("contiguous head block")
}

fn order_virtual(block: &Tensor, ordering: Ordering) -> Result<Tensor> {
    // block is [P, N, d]
    let (p, n, d) = (block.shape()[0], block.shape()[1], block.shape()[2]);
    match ordering {
        Ordering::Interleaved => block.swap_axes01()?.reshape(&[n * p, d]),
        Ordering::PseudoMajor => block.reshape(&[p * n, d]),
    }
}

fn unorder_virtual(rows: &Tensor, n: usize, p: usize, ordering: Ordering) -> Result<Tensor> {
    // rows is [N*P, dv]; result is [P, N, dv]
    let d = rows.cols();
    match ordering {
        Ordering::Interleaved => rows.reshape(&[n, p, d])?.swap_axes01(),
        Ordering::PseudoMajor => rows.reshape(&[p, n, d]),
    }
}

/// The full IHA pipeline over a (possibly rectangular) bank:
/// mix -> order -> per-head attention over N*P virtual tokens -> unorder ->
/// collapse over the H*P axis. Returns per-head [N, dv] outputs.
#[allow(clippy::too_many_arguments)]
pub fn mixed_bank_attend(
    x: &Tensor,
    bank: &HeadBank,
    alpha_q: &Tensor,
    alpha_k: &Tensor,
    alpha_v: &Tensor,
    collapse: &Tensor,
    mode: ScoreMode,
    mask: Option<&Mask>,
    positional: Positional,
    ordering: Ordering,
) -> Result<Vec<Tensor>> {
    bank.validate()?;
    let h = bank.heads();
    let p = alpha_q.shape()[2];
    let n = x.rows();
    if collapse.shape() != [h, h * p] {
        return Err(Error::shape("collapse", &[h, h * p], collapse.shape()));
    }

    let mixed_q = mix_projections(x, &bank.wq, alpha_q)?;
    let mixed_k = mix_projections(x, &bank.wk, alpha_k)?;
    let mixed_v = mix_projections(x, &bank.wv, alpha_v)?;

    let l = n * p;
    let positions: Vec<usize> = (0..l).collect();
    let dv = bank.wv[0].cols();
    let mut stacked = Tensor::zeros(&[h, p, n, dv]);
    for hh in 0..h {
        let mut q = order_virtual(&head_block(&mixed_q, hh), ordering)?;
        let mut k = order_virtual(&head_block(&mixed_k, hh), ordering)?;
        let v = order_virtual(&head_block(&mixed_v, hh), ordering)?;
        if let Positional::Rotary { theta } = positional {
            q = rotary_positions(&q, theta, &positions)?;
            k = rotary_positions(&k, theta, &positions)?;
        }
        let out = head_attention(&q, &k, &v, mode, mask)?;
        let block = unorder_virtual(&out, n, p, ordering)?;
        for pp in 0..p {
            for nn in 0..n {
                for c in 0..dv {
                    stacked.set(&[hh, pp, nn, c], block.at(&[pp, nn, c]));
                }
            }
        }
    }

    let flat = stacked.reshape(&[h * p, n, dv])?;
    let collapsed = contract("hq,qnd->hnd", &[collapse, &flat])?;
    Ok((0..h).map(|hh| head_block(&collapsed, hh)).collect())
}

/// Interleaved-head attention forward pass over square parameters,
/// including the output projection.
pub fn iha_forward(
    x: &Tensor,
    params: &IhaParams,
    cfg: &AttentionConfig,
    ordering: Ordering,
) -> Result<Tensor> {
    cfg.validate()?;
    params.validate(cfg.d_model, cfg.head_dim)?;
    if x.shape() != [cfg.seq_len, cfg.d_model] {
        return Err(Error::shape("iha input", &[cfg.seq_len, cfg.d_model], x.shape()));
    }
    if params.pseudo() != cfg.pseudo {
        return Err(Error::InvalidConfig(format!(
            "params have P={}, config has P={}",
            params.pseudo(),
            cfg.pseudo
        )));
    }
    let mask = cfg.virtual_mask(cfg.seq_len * cfg.pseudo)?;
    let outs = mixed_bank_attend(
        x,
        &params.base.heads,
        &params.alpha_q,
        &params.alpha_k,
        &params.alpha_v,
        &params.collapse,
        cfg.score_mode,
        mask.as_ref(),
        cfg.positional,
        ordering,
    )?;
    let refs: Vec<&Tensor> = outs.iter().collect();
    let concat = Tensor::concat_cols(&refs)?;
    tensor::matmul(&concat, &params.base.wo)
}

/// Identity routers on every pseudo channel plus a collapse selecting pseudo 1
/// of each head's own block. `iha_forward` on the result reproduces
/// `mha_forward` for all inputs (without masks or positional encodings the
/// equality is exact up to rounding).
pub fn embed_mha_as_iha(m: &MhaParams, pseudo: usize) -> Result<IhaParams> {
    if pseudo == 0 {
        return Err(Error::InvalidConfig("pseudo-head count must be >= 1".into()));
    }
    let h = m.heads.heads();
    let identity_router = Tensor::from_fn(&[h, h, pseudo], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 });
    Ok(IhaParams {
        base: m.clone(),
        alpha_q: identity_router.clone(),
        alpha_k: identity_router.clone(),
        alpha_v: identity_router,
        collapse: select_first_pseudo_collapse(h, pseudo),
    })
}

/// The strictness witness: a P=2 configuration that is nonlinear on the
/// repeated-token subspace, which no MHA module can be. Pseudo channel 2
/// carries sign-flipped queries, keys and values, so on repeated tokens each
/// head output is tanh of the query-key score times the value projection.
pub fn strictness_witness(heads: usize, head_dim: usize) -> Result<IhaParams> {
    if heads == 0 || head_dim == 0 {
        return Err(Error::InvalidConfig("witness needs H >= 1 and d >= 1".into()));
    }
    let d_model = heads * head_dim;
    let mut rng = CounterRng::from_path(0x6a3d_9b71, &[heads as u64, head_dim as u64]);
    let mut base = MhaParams::random(heads, d_model, head_dim, &mut rng);
    // Unit-scale weights keep the score magnitude O(1) so the nonlinearity is
    // visible; identity output projection keeps the head outputs unobscured.
    let scale = (d_model as f64).sqrt();
    for w in base
        .heads
        .wq
        .iter_mut()
        .chain(base.heads.wk.iter_mut())
        .chain(base.heads.wv.iter_mut())
    {
        *w = w.scale(scale);
    }
    base.wo = Tensor::eye(d_model);

    let signed = |second: f64| {
        Tensor::from_fn(&[heads, heads, 2], |ix| {
            if ix[0] != ix[1] {
                0.0
            } else if ix[2] == 0 {
                1.0
            } else {
                second
            }
        })
    };
    Ok(IhaParams {
        base,
        alpha_q: signed(-1.0),
        alpha_k: signed(-1.0),
        alpha_v: signed(-1.0),
        collapse: select_first_pseudo_collapse(heads, 2),
    })
}

// ---------------------------------------------------------------------------
// Parameter container: named f64 tensors, little-endian, with a JSON shape
// manifest up front.

const CONTAINER_MAGIC: &[u8; 8] = b"IHTENSR1";

#[derive(serde::Serialize, serde::Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_named_tensors(path: &Path, items: &[(&str, &Tensor)]) -> Result<()> {
    let manifest: Vec<ManifestEntry> = items
        .iter()
        .map(|(name, t)| ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CONTAINER_MAGIC)?;
    f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_bytes)?;
    for (_, t) in items {
        for v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_named_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::Other(format!(
            "{} is not a tensor container (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    f.read_exact(&mut manifest_bytes)?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&manifest_bytes)?;
    let mut out = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let numel: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            f.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    Ok(out)
}

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, matmul, Scalar};
use super::{LmConfig, LmError};
use crate::kappa::{DupScheme, RuleFlags};

/// Which embedding matrix to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSide {
    Input,
    Output,
}

impl std::str::FromStr for EmbeddingSide {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "input" => Ok(Self::Input),
            "output" => Ok(Self::Output),
            _ => Err(format!("unknown embedding side {s:?}")),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerLayout {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    w_qkv: Range<usize>,
    b_qkv: Range<usize>,
    w_o: Range<usize>,
    b_o: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w_fc: Range<usize>,
    b_fc: Range<usize>,
    w_proj: Range<usize>,
    b_proj: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    wte: Range<usize>,
    wpe: Range<usize>,
    nc: Range<usize>,
    layers: Vec<LayerLayout>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
    /// Equal to `wte` for tied models.
    wout: Range<usize>,
    out_bias: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(c: &LmConfig) -> Self {
        let d = c.hidden_size;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let wte = take(c.vocab_size * d);
        let wpe = take(c.context_length * d);
        let nc = take(c.noncanonical_embedding_count * d);
        let layers = (0..c.layers)
            .map(|_| LayerLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * 4 * d),
                b_fc: take(4 * d),
                w_proj: take(4 * d * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let wout = if c.tied_embeddings {
            wte.clone()
        } else {
            take(c.vocab_size * d)
        };
        let out_bias = take(c.vocab_size);
        Self {
            wte,
            wpe,
            nc,
            layers,
            lnf_g,
            lnf_b,
            wout,
            out_bias,
            total: at,
        }
    }
}

/// Decoder-only transformer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S: Scalar> {
    config: LmConfig,
    params: Vec<S>,
    layout: Layout,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.total == other.total
    }
}

struct LayerCache<S> {
    ln1_xhat: Vec<S>,
    ln1_rstd: Vec<S>,
    ln1_out: Vec<S>,
    qkv: Vec<S>,
    att_p: Vec<S>,
    att_out: Vec<S>,
    ln2_xhat: Vec<S>,
    ln2_rstd: Vec<S>,
    ln2_out: Vec<S>,
    fc_pre: Vec<S>,
    fc_act: Vec<S>,
}

pub(crate) struct Cache<S> {
    layers: Vec<LayerCache<S>>,
    lnf_xhat: Vec<S>,
    lnf_rstd: Vec<S>,
    /// Final normalized hidden states, `(b·t) × d`.
    hidden: Vec<S>,
}

/// Rows per block when materializing logits.
const LOGIT_BLOCK: usize = 256;

impl<S: Scalar> Model<S> {
    /// GPT-2 style initialization: N(0, 0.02) weights, residual projections
    /// scaled by `1/sqrt(2·layers)`, zero biases, unit norm gains, and zero
    /// non-canonical embeddings.
    pub fn new(config: LmConfig) -> Result<Self, LmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![S::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let normal = Normal::new(0.0, std).expect("valid std");
        let resid = Normal::new(0.0, std / (2.0 * config.layers as f64).sqrt()).expect("valid std");
        let mut fill = |r: &Range<usize>, dist: &Normal<f64>, params: &mut [S]| {
            for p in &mut params[r.clone()] {
                *p = S::from_f64(dist.sample(&mut rng));
            }
        };
        fill(&layout.wte, &normal, &mut params);
        fill(&layout.wpe, &normal, &mut params);
        for l in &layout.layers {
            fill(&l.w_qkv, &normal, &mut params);
            fill(&l.w_o, &resid, &mut params);
            fill(&l.w_fc, &normal, &mut params);
            fill(&l.w_proj, &resid, &mut params);
            for r in [&l.ln1_g, &l.ln2_g] {
                params[r.clone()].fill(S::one());
            }
        }
        params[layout.lnf_g.clone()].fill(S::one());
        if !config.tied_embeddings {
            fill(&layout.wout, &normal, &mut params);
        }
        Ok(Self { config, params, layout })
    }

    pub(crate) fn from_params(config: LmConfig, params: Vec<S>) -> Result<Self, LmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(LmError::Format(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    /// Converts every parameter to another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|&p| T::from_f64(p.as_f64())).collect(),
            layout: self.layout.clone(),
        }
    }

    fn p(&self, r: &Range<usize>) -> &[S] {
        &self.params[r.clone()]
    }

    /// The current embedding row of `id`.
    pub fn embedding(&self, side: EmbeddingSide, id: u32) -> Result<&[S], LmError> {
        let v = self.config.vocab_size;
        if id as usize >= v {
            return Err(LmError::IdOutOfRange { id, vocab: v });
        }
        let d = self.config.hidden_size;
        let base = match side {
            EmbeddingSide::Input => self.layout.wte.start,
            EmbeddingSide::Output => self.layout.wout.start,
        };
        let at = base + id as usize * d;
        Ok(&self.params[at..at + d])
    }

    pub fn output_bias(&self) -> &[S] {
        self.p(&self.layout.out_bias)
    }

    fn check_inputs(&self, ids: &[u32], flags: Option<&[RuleFlags]>, t: usize) -> Result<(), LmError> {
        if ids.is_empty() {
            return Err(LmError::Empty);
        }
        if t > self.config.context_length {
            return Err(LmError::TooLong {
                len: t,
                max: self.config.context_length,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(LmError::IdOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        if let Some(f) = flags {
            if self.config.noncanonical_embedding_count == 0 {
                return Err(LmError::UnexpectedFlags);
            }
            if f.len() != ids.len() {
                return Err(LmError::FlagLength {
                    flags: f.len(),
                    tokens: ids.len(),
                });
            }
        }
        Ok(())
    }

    /// Indices of the non-canonical vectors added for `flags`.
    fn nc_slots(&self, flags: RuleFlags) -> impl Iterator<Item = usize> {
        let bits = flags.bits();
        let count = self.config.noncanonical_embedding_count;
        (0..count).filter(move |&k| match count {
            1 => bits != 0,
            _ => bits & (1 << k) != 0,
        })
    }

    /// Runs the network on `b` sequences of length `t` laid out row by row,
    /// returning the activations needed for the output layer and backward.
    pub(crate) fn forward_hidden(
        &self,
        ids: &[u32],
        flags: Option<&[RuleFlags]>,
        b: usize,
        t: usize,
    ) -> Result<Cache<S>, LmError> {
        self.check_inputs(ids, flags, t)?;
        assert_eq!(ids.len(), b * t);
        let c = &self.config;
        let (d, h) = (c.hidden_size, c.heads);
        let hd = d / h;
        let n = b * t;
        let scale = S::from_f64(1.0 / (hd as f64).sqrt());

        let mut x = vec![S::zero(); n * d];
        let wte = self.p(&self.layout.wte);
        let wpe = self.p(&self.layout.wpe);
        let nc = self.p(&self.layout.nc);
        for (row, &id) in ids.iter().enumerate() {
            let pos = row % t;
            let xr = &mut x[row * d..(row + 1) * d];
            let e = &wte[id as usize * d..(id as usize + 1) * d];
            let pe = &wpe[pos * d..(pos + 1) * d];
            for j in 0..d {
                xr[j] = e[j] + pe[j];
            }
            if let Some(f) = flags {
                for k in self.nc_slots(f[row]) {
                    for j in 0..d {
                        xr[j] = xr[j] + nc[k * d + j];
                    }
                }
            }
        }

        let mut layers = Vec::with_capacity(c.layers);
        let mut q = vec![S::zero(); t * hd];
        let mut k = vec![S::zero(); t * hd];
        let mut v = vec![S::zero(); t * hd];
        let mut o = vec![S::zero(); t * hd];
        for l in &self.layout.layers {
            let mut lc = LayerCache {
                ln1_xhat: vec![S::zero(); n * d],
                ln1_rstd: vec![S::zero(); n],
                ln1_out: vec![S::zero(); n * d],
                qkv: vec![S::zero(); n * 3 * d],
                att_p: vec![S::zero(); b * h * t * t],
                att_out: vec![S::zero(); n * d],
                ln2_xhat: vec![S::zero(); n * d],
                ln2_rstd: vec![S::zero(); n],
                ln2_out: vec![S::zero(); n * d],
                fc_pre: vec![S::zero(); n * 4 * d],
                fc_act: vec![S::zero(); n * 4 * d],
            };
            ops::layernorm(
                &x,
                self.p(&l.ln1_g),
                self.p(&l.ln1_b),
                d,
                &mut lc.ln1_out,
                &mut lc.ln1_xhat,
                &mut lc.ln1_rstd,
            );
            matmul(
                &mut lc.qkv,
                &lc.ln1_out,
                self.p(&l.w_qkv),
                n,
                d,
                3 * d,
                false,
                false,
                false,
            );
            ops::add_row_bias(&mut lc.qkv, self.p(&l.b_qkv));

            for bi in 0..b {
                for hi in 0..h {
                    gather_head(&lc.qkv, bi, hi, t, d, hd, &mut q, &mut k, &mut v);
                    let pmat = &mut lc.att_p[(bi * h + hi) * t * t..(bi * h + hi + 1) * t * t];
                    matmul(pmat, &q, &k, t, hd, t, false, true, false);
                    for i in 0..t {
                        let row = &mut pmat[i * t..(i + 1) * t];
                        for s in row[..=i].iter_mut() {
                            *s = *s * scale;
                        }
                        ops::softmax_in_place(&mut row[..=i]);
                        row[i + 1..].fill(S::zero());
                    }
                    matmul(&mut o, pmat, &v, t, t, hd, false, false, false);
                    for i in 0..t {
                        let dst = (bi * t + i) * d + hi * hd;
                        lc.att_out[dst..dst + hd].copy_from_slice(&o[i * hd..(i + 1) * hd]);
                    }
                }
            }
            // x += att_out · W_o + b_o
            matmul(&mut x, &lc.att_out, self.p(&l.w_o), n, d, d, false, false, true);
            ops::add_row_bias(&mut x, self.p(&l.b_o));

            ops::layernorm(
                &x,
                self.p(&l.ln2_g),
                self.p(&l.ln2_b),
                d,
                &mut lc.ln2_out,
                &mut lc.ln2_xhat,
                &mut lc.ln2_rstd,
            );
            matmul(
                &mut lc.fc_pre,
                &lc.ln2_out,
                self.p(&l.w_fc),
                n,
                d,
                4 * d,
                false,
                false,
                false,
            );
            ops::add_row_bias(&mut lc.fc_pre, self.p(&l.b_fc));
            for (a, &z) in lc.fc_act.iter_mut().zip(&lc.fc_pre) {
                *a = ops::gelu(z);
            }
            matmul(&mut x, &lc.fc_act, self.p(&l.w_proj), n, 4 * d, d, false, false, true);
            ops::add_row_bias(&mut x, self.p(&l.b_proj));
            layers.push(lc);
        }

        let mut hidden = vec![S::zero(); n * d];
        let mut lnf_xhat = vec![S::zero(); n * d];
        let mut lnf_rstd = vec![S::zero(); n];
        ops::layernorm(
            &x,
            self.p(&self.layout.lnf_g),
            self.p(&self.layout.lnf_b),
            d,
            &mut hidden,
            &mut lnf_xhat,
            &mut lnf_rstd,
        );
        Ok(Cache {
            layers,
            lnf_xhat,
            lnf_rstd,
            hidden,
        })
    }

    /// Logits for a block of final hidden rows, `rows × vocab`.
    fn logits_block(&self, hidden_rows: &[S], out: &mut [S]) {
        let d = self.config.hidden_size;
        let v = self.config.vocab_size;
        let rows = hidden_rows.len() / d;
        matmul(
            out,
            hidden_rows,
            self.p(&self.layout.wout),
            rows,
            d,
            v,
            false,
            true,
            false,
        );
        ops::add_row_bias(&mut out[..rows * v], self.p(&self.layout.out_bias));
    }

    /// Log-probabilities over the vocabulary at positions `rows` of a single
    /// sequence, `rows.len() × vocab`.
    pub fn log_probs(&self, ids: &[u32], flags: Option<&[RuleFlags]>, rows: Range<usize>) -> Result<Vec<S>, LmError> {
        let cache = self.forward_hidden(ids, flags, 1, ids.len())?;
        let d = self.config.hidden_size;
        let v = self.config.vocab_size;
        let rows = rows.start.min(ids.len())..rows.end.min(ids.len());
        let mut out = vec![S::zero(); rows.len() * v];
        let hidden = &cache.hidden[rows.start * d..rows.end * d];
        for (hb, ob) in hidden.chunks(LOGIT_BLOCK * d).zip(out.chunks_mut(LOGIT_BLOCK * v)) {
            self.logits_block(hb, ob);
            for row in ob.chunks_exact_mut(v) {
                let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
                let sum = row.iter().fold(S::zero(), |s, &x| s + (x - max).exp());
                let lse = max + sum.ln();
                for x in row.iter_mut() {
                    *x = *x - lse;
                }
            }
        }
        Ok(out)
    }

    /// Next-token distribution at every position of one sequence.
    pub fn forward(&self, ids: &[u32], flags: Option<&[RuleFlags]>) -> Result<Vec<Vec<S>>, LmError> {
        let lp = self.log_probs(ids, flags, 0..ids.len())?;
        Ok(lp
            .chunks_exact(self.config.vocab_size)
            .map(|r| r.iter().map(|x| x.exp()).collect())
            .collect())
    }

    /// Mean next-token cross-entropy over `b × t` positions and its gradient,
    /// accumulated into `grads` (same layout as the parameters).
    pub(crate) fn loss_and_grad(
        &self,
        inputs: &[u32],
        targets: &[u32],
        flags: Option<&[RuleFlags]>,
        b: usize,
        t: usize,
        grads: &mut [S],
    ) -> Result<S, LmError> {
        assert_eq!(grads.len(), self.layout.total);
        if let Some(&id) = targets.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(LmError::IdOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        let cache = self.forward_hidden(inputs, flags, b, t)?;
        let c = &self.config;
        let (d, v, h) = (c.hidden_size, c.vocab_size, c.heads);
        let hd = d / h;
        let n = b * t;
        let inv_n = S::from_f64(1.0 / n as f64);
        let scale = S::from_f64(1.0 / (hd as f64).sqrt());
        let lay = &self.layout;

        // output layer, one block of rows at a time
        let mut loss = 0.0f64;
        let mut dhidden = vec![S::zero(); n * d];
        let mut logits = vec![S::zero(); LOGIT_BLOCK.min(n) * v];
        for start in (0..n).step_by(LOGIT_BLOCK) {
            let end = (start + LOGIT_BLOCK).min(n);
            let rows = end - start;
            let block = &mut logits[..rows * v];
            self.logits_block(&cache.hidden[start * d..end * d], block);
            for (r, row) in block.chunks_exact_mut(v).enumerate() {
                let tgt = targets[start + r] as usize;
                let z = row[tgt];
                let lse = ops::softmax_in_place(row);
                loss += (lse - z).as_f64();
                row[tgt] = row[tgt] - S::one();
                for x in row.iter_mut() {
                    *x = *x * inv_n;
                }
            }
            matmul(
                &mut grads[lay.wout.clone()],
                block,
                &cache.hidden[start * d..end * d],
                v,
                rows,
                d,
                true,
                false,
                true,
            );
            ops::accumulate_col_sums(block, &mut grads[lay.out_bias.clone()]);
            matmul(
                &mut dhidden[start * d..end * d],
                block,
                self.p(&lay.wout),
                rows,
                v,
                d,
                false,
                false,
                false,
            );
        }

        let mut dx = vec![S::zero(); n * d];
        {
            let (dg, db) = two_mut(grads, &lay.lnf_g, &lay.lnf_b);
            ops::layernorm_backward(
                &dhidden,
                &cache.lnf_xhat,
                &cache.lnf_rstd,
                self.p(&lay.lnf_g),
                d,
                &mut dx,
                dg,
                db,
            );
        }
        drop(dhidden);

        let mut dtmp = vec![S::zero(); n * 4 * d];
        let mut dln = vec![S::zero(); n * d];
        let mut dqkv = vec![S::zero(); n * 3 * d];
        let mut datt = vec![S::zero(); n * d];
        let (mut q, mut k, mut vv) = (
            vec![S::zero(); t * hd],
            vec![S::zero(); t * hd],
            vec![S::zero(); t * hd],
        );
        let mut dout = vec![S::zero(); t * hd];
        let mut dp = vec![S::zero(); t * t];
        let mut dq = vec![S::zero(); t * hd];
        let mut dk = vec![S::zero(); t * hd];
        let mut dv = vec![S::zero(); t * hd];
        for (l, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // MLP
            matmul(
                &mut grads[l.w_proj.clone()],
                &lc.fc_act,
                &dx,
                4 * d,
                n,
                d,
                true,
                false,
                true,
            );
            ops::accumulate_col_sums(&dx, &mut grads[l.b_proj.clone()]);
            matmul(&mut dtmp, &dx, self.p(&l.w_proj), n, d, 4 * d, false, true, false);
            for (g, &z) in dtmp.iter_mut().zip(&lc.fc_pre) {
                *g = *g * ops::gelu_grad(z);
            }
            matmul(
                &mut grads[l.w_fc.clone()],
                &lc.ln2_out,
                &dtmp,
                d,
                n,
                4 * d,
                true,
                false,
                true,
            );
            ops::accumulate_col_sums(&dtmp, &mut grads[l.b_fc.clone()]);
            matmul(&mut dln, &dtmp, self.p(&l.w_fc), n, 4 * d, d, false, true, false);
            {
                let (dg, db) = two_mut(grads, &l.ln2_g, &l.ln2_b);
                ops::layernorm_backward(&dln, &lc.ln2_xhat, &lc.ln2_rstd, self.p(&l.ln2_g), d, &mut dx, dg, db);
            }

            // attention
            matmul(&mut grads[l.w_o.clone()], &lc.att_out, &dx, d, n, d, true, false, true);
            ops::accumulate_col_sums(&dx, &mut grads[l.b_o.clone()]);
            matmul(&mut datt, &dx, self.p(&l.w_o), n, d, d, false, true, false);
            for bi in 0..b {
                for hi in 0..h {
                    gather_head(&lc.qkv, bi, hi, t, d, hd, &mut q, &mut k, &mut vv);
                    for i in 0..t {
                        let src = (bi * t + i) * d + hi * hd;
                        dout[i * hd..(i + 1) * hd].copy_from_slice(&datt[src..src + hd]);
                    }
                    let pmat = &lc.att_p[(bi * h + hi) * t * t..(bi * h + hi + 1) * t * t];
                    matmul(&mut dp, &dout, &vv, t, hd, t, false, true, false);
                    matmul(&mut dv, pmat, &dout, t, t, hd, true, false, false);
                    for i in 0..t {
                        let pr = &pmat[i * t..(i + 1) * t];
                        let dr = &mut dp[i * t..(i + 1) * t];
                        let dot = (0..=i).fold(S::zero(), |s, j| s + pr[j] * dr[j]);
                        for j in 0..=i {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                        dr[i + 1..].fill(S::zero());
                    }
                    matmul(&mut dq, &dp, &k, t, t, hd, false, false, false);
                    matmul(&mut dk, &dp, &q, t, t, hd, true, false, false);
                    for i in 0..t {
                        let dst = (bi * t + i) * 3 * d + hi * hd;
                        dqkv[dst..dst + hd].copy_from_slice(&dq[i * hd..(i + 1) * hd]);
                        dqkv[dst + d..dst + d + hd].copy_from_slice(&dk[i * hd..(i + 1) * hd]);
                        dqkv[dst + 2 * d..dst + 2 * d + hd].copy_from_slice(&dv[i * hd..(i + 1) * hd]);
                    }
                }
            }
            matmul(
                &mut grads[l.w_qkv.clone()],
                &lc.ln1_out,
                &dqkv,
                d,
                n,
                3 * d,
                true,
                false,
                true,
            );
            ops::accumulate_col_sums(&dqkv, &mut grads[l.b_qkv.clone()]);
            matmul(&mut dln, &dqkv, self.p(&l.w_qkv), n, 3 * d, d, false, true, false);
            {
                let (dg, db) = two_mut(grads, &l.ln1_g, &l.ln1_b);
                ops::layernorm_backward(&dln, &lc.ln1_xhat, &lc.ln1_rstd, self.p(&l.ln1_g), d, &mut dx, dg, db);
            }
        }

        // embeddings
        for (row, &id) in inputs.iter().enumerate() {
            let pos = row % t;
            let g = &dx[row * d..(row + 1) * d];
            for slot in [lay.wte.start + id as usize * d, lay.wpe.start + pos * d] {
                for j in 0..d {
                    grads[slot + j] = grads[slot + j] + g[j];
                }
            }
            if let Some(f) = flags {
                for kk in self.nc_slots(f[row]) {
                    let slot = lay.nc.start + kk * d;
                    for j in 0..d {
                        grads[slot + j] = grads[slot + j] + g[j];
                    }
                }
            }
        }
        Ok(S::from_f64(loss / n as f64))
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(
        &self,
        inputs: &[u32],
        targets: &[u32],
        flags: Option<&[RuleFlags]>,
        b: usize,
        t: usize,
    ) -> Result<f64, LmError> {
        let cache = self.forward_hidden(inputs, flags, b, t)?;
        let v = self.config.vocab_size;
        let d = self.config.hidden_size;
        let n = b * t;
        let mut total = 0.0;
        let mut logits = vec![S::zero(); LOGIT_BLOCK.min(n) * v];
        for start in (0..n).step_by(LOGIT_BLOCK) {
            let end = (start + LOGIT_BLOCK).min(n);
            let block = &mut logits[..(end - start) * v];
            self.logits_block(&cache.hidden[start * d..end * d], block);
            for (r, row) in block.chunks_exact(v).enumerate() {
                let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
                let sum = row.iter().fold(S::zero(), |s, &x| s + (x - max).exp());
                total += (max + sum.ln() - row[targets[start + r] as usize]).as_f64();
            }
        }
        Ok(total / n as f64)
    }

    /// Builds a model over the duplicated vocabulary in which every twin
    /// shares its base symbol's input and output rows, and duplicated output
    /// biases are lowered by `ln 2`. The twin-summed distribution of the
    /// result equals this model's distribution.
    pub fn expand_twins(&self, scheme: &DupScheme) -> Result<Model<S>, LmError> {
        let base_len = scheme.base_vocab().len();
        if base_len != self.config.vocab_size {
            return Err(LmError::VocabMismatch {
                stream: base_len,
                model: self.config.vocab_size,
            });
        }
        let mut config = self.config.clone();
        config.vocab_size = scheme.dup_vocab().len();
        let mut out = Model::new(config)?;
        let d = self.config.hidden_size;
        let src = &self.layout;
        let dst = out.layout.clone();
        let copy_prefix = |out: &mut Model<S>, s: &Range<usize>, t: &Range<usize>| {
            out.params[t.start..t.start + s.len()].copy_from_slice(&self.params[s.clone()]);
        };
        // everything between the two vocabulary-sized blocks lines up one to one
        copy_prefix(&mut out, &src.wte, &dst.wte);
        copy_prefix(
            &mut out,
            &(src.wpe.start..src.lnf_b.end),
            &(dst.wpe.start..dst.lnf_b.end),
        );
        if !self.config.tied_embeddings {
            copy_prefix(&mut out, &src.wout, &dst.wout);
        }
        copy_prefix(&mut out, &src.out_bias, &dst.out_bias);
        let ln2 = S::from_f64(std::f64::consts::LN_2);
        for (b, p) in scheme.twin_pairs() {
            let (b, p) = (b as usize, p as usize);
            for m in [&dst.wte, &dst.wout] {
                out.params
                    .copy_within(m.start + b * d..m.start + (b + 1) * d, m.start + p * d);
            }
            let bias = dst.out_bias.start;
            let lowered = out.params[bias + b] - ln2;
            out.params[bias + b] = lowered;
            out.params[bias + p] = lowered;
        }
        Ok(out)
    }

    /// Overwrites every twin's input and output rows (and output bias) with
    /// its base symbol's, making the pair interchangeable.
    pub fn tie_twins(&mut self, scheme: &DupScheme) -> Result<(), LmError> {
        if scheme.dup_vocab().len() != self.config.vocab_size {
            return Err(LmError::VocabMismatch {
                stream: scheme.dup_vocab().len(),
                model: self.config.vocab_size,
            });
        }
        let d = self.config.hidden_size;
        for (b, p) in scheme.twin_pairs() {
            let (b, p) = (b as usize, p as usize);
            for m in [self.layout.wte.clone(), self.layout.wout.clone()] {
                self.params
                    .copy_within(m.start + b * d..m.start + (b + 1) * d, m.start + p * d);
            }
            let bias = self.layout.out_bias.start;
            self.params[bias + p] = self.params[bias + b];
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn gather_head<S: Scalar>(
    qkv: &[S],
    bi: usize,
    hi: usize,
    t: usize,
    d: usize,
    hd: usize,
    q: &mut [S],
    k: &mut [S],
    v: &mut [S],
) {
    for i in 0..t {
        let src = (bi * t + i) * 3 * d + hi * hd;
        q[i * hd..(i + 1) * hd].copy_from_slice(&qkv[src..src + hd]);
        k[i * hd..(i + 1) * hd].copy_from_slice(&qkv[src + d..src + d + hd]);
        v[i * hd..(i + 1) * hd].copy_from_slice(&qkv[src + 2 * d..src + 2 * d + hd]);
    }
}

/// Two disjoint mutable sub-slices; `a` must precede `b`.
fn two_mut<'a, S>(xs: &'a mut [S], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [S], &'a mut [S]) {
    assert!(a.end <= b.start);
    let (lo, hi) = xs.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kappa::build_dup_for_ids;
    use crate::vocab::Vocabulary;
    use std::sync::Arc;

    fn perturbed(config: LmConfig, seed: u64) -> Model<f64> {
        let mut m = Model::<f64>::new(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        for p in m.params_mut() {
            *p += noise.sample(&mut rng);
        }
        m
    }

    #[test]
    fn rows_are_distributions() {
        let m = Model::<f32>::new(LmConfig::micro(11)).unwrap();
        let probs = m.forward(&[1, 2, 3, 4, 5], None).unwrap();
        assert_eq!(probs.len(), 5);
        for row in probs {
            assert_eq!(row.len(), 11);
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn input_errors() {
        let m = Model::<f32>::new(LmConfig::micro(11)).unwrap();
        assert!(matches!(m.forward(&[11], None), Err(LmError::IdOutOfRange { .. })));
        assert!(matches!(m.forward(&[1; 9], None), Err(LmError::TooLong { .. })));
        assert!(matches!(m.forward(&[], None), Err(LmError::Empty)));
        assert!(matches!(
            m.forward(&[1], Some(&[RuleFlags::LOWER])),
            Err(LmError::UnexpectedFlags)
        ));
        assert!(m.embedding(EmbeddingSide::Output, 11).is_err());
        assert_eq!(m.embedding(EmbeddingSide::Input, 10).unwrap().len(), 16);
    }

    #[test]
    fn causal() {
        let m = perturbed(LmConfig::micro(11), 3);
        let a = m.forward(&[1, 2, 3, 4, 5, 6], None).unwrap();
        for t in 0..6 {
            let mut ids = vec![1, 2, 3, 4, 5, 6];
            ids[t] = 9;
            let b = m.forward(&ids, None).unwrap();
            for s in 0..t {
                assert_eq!(a[s], b[s], "position {s} changed when {t} was perturbed");
            }
            assert_ne!(a[t], b[t]);
        }
    }

    #[test]
    fn zero_flags_change_nothing() {
        let mut c = LmConfig::micro(11);
        c.noncanonical_embedding_count = 3;
        let m = perturbed(c, 5);
        let ids = [1, 2, 3, 4];
        let plain = m.forward(&ids, None).unwrap();
        let flagged = m.forward(&ids, Some(&[RuleFlags::NONE; 4])).unwrap();
        assert_eq!(plain, flagged);
        let active = m
            .forward(
                &ids,
                Some(&[RuleFlags::NONE, RuleFlags::LOWER, RuleFlags::NONE, RuleFlags::NONE]),
            )
            .unwrap();
        assert_eq!(plain[0], active[0]);
        assert_ne!(plain[1], active[1]);
    }

    fn grad_check(config: LmConfig, flags: Option<Vec<RuleFlags>>) {
        let m = perturbed(config.clone(), 11);
        let t = 8;
        let b = 2;
        let inputs: Vec<u32> = (0..b * t).map(|i| ((i * 7 + 3) % config.vocab_size) as u32).collect();
        let targets: Vec<u32> = (0..b * t).map(|i| ((i * 5 + 1) % config.vocab_size) as u32).collect();
        let mut grads = vec![0.0; m.num_params()];
        let f = flags.as_deref();
        m.loss_and_grad(&inputs, &targets, f, b, t, &mut grads).unwrap();
        let loss = m.loss(&inputs, &targets, f, b, t).unwrap();
        let mut g2 = vec![0.0; m.num_params()];
        let l2 = m.loss_and_grad(&inputs, &targets, f, b, t, &mut g2).unwrap();
        assert!((loss - l2).abs() < 1e-12);

        let eps = 1e-5;
        let mut worst = 0.0f64;
        let mut checked = 0;
        for i in (0..m.num_params()).step_by(7) {
            let mut plus = m.clone();
            plus.params[i] += eps;
            let mut minus = m.clone();
            minus.params[i] -= eps;
            let fd = (plus.loss(&inputs, &targets, f, b, t).unwrap() - minus.loss(&inputs, &targets, f, b, t).unwrap())
                / (2.0 * eps);
            let an = grads[i];
            if fd.abs().max(an.abs()) < 1e-7 {
                continue;
            }
            let rel = (fd - an).abs() / (fd.abs() + an.abs());
            worst = worst.max(rel);
            checked += 1;
        }
        assert!(checked > 100, "{checked}");
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        grad_check(LmConfig::micro(11), None);
    }

    #[test]
    fn gradients_with_tied_embeddings_and_flags() {
        let mut c = LmConfig::micro(11);
        c.tied_embeddings = true;
        c.noncanonical_embedding_count = 3;
        let flags = (0..16).map(|i| RuleFlags::from_bits((i % 8) as u8)).collect();
        grad_check(c, Some(flags));
    }

    #[test]
    fn expanded_twins_collapse_to_the_base_model() {
        let entries: Vec<String> = (0..11)
            .map(|i| if i == 0 { "<eos>".into() } else { format!("s{i}") })
            .collect();
        let v = Arc::new(Vocabulary::from_entries(entries, 0).unwrap());
        let (scheme, _) = build_dup_for_ids(v, &[1, 4, 5, 9], 0.5).unwrap();
        let base = perturbed(LmConfig::micro(11), 2);
        let dup = base.expand_twins(&scheme).unwrap();
        let ids = [1, 4, 2, 9, 3];
        let dup_ids: Vec<u32> = ids
            .iter()
            .map(|&i| scheme.prime_of(i).filter(|_| i % 2 == 1).unwrap_or(i))
            .collect();
        let pb = base.forward(&ids, None).unwrap();
        let pd = dup.forward(&dup_ids, None).unwrap();
        for (rb, rd) in pb.iter().zip(&pd) {
            for (id, &p) in rb.iter().enumerate() {
                let mut s = rd[id];
                if let Some(twin) = scheme.prime_of(id as u32) {
                    s += rd[twin as usize];
                }
                assert!((s - p).abs() < 1e-12, "{s} vs {p}");
            }
        }
    }
}

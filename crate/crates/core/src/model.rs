//! Encoder-attention-decoder network.
//!
//! * Encoder: separate forward and backward LSTM stacks over source
//!   embeddings; the annotation at position `s` is `[fwd_top(s); bwd_top(s)]`.
//! * Annotations are projected to hidden width (`keys`) so the bilinear
//!   score matrix `W_a` is square.
//! * Decoder: LSTM stack fed `[emb(prev); h̃_prev]` (input feeding), global
//!   attention with `score = hᵀ W_a k_s`, `h̃ = tanh(W_c [c; h])`,
//!   `logits = W_s h̃ + b_s`.
//! * Decoder layer `l` starts from `tanh(B_h[l] [h_fwd; h_bwd])` and
//!   `B_c[l] [c_fwd; c_bwd]` of the matching encoder layers.
//!
//! Dropout (train mode only) is applied to the inputs of every LSTM layer
//! above the first and to `h̃` before the output projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{
    self, axpy, dot, dropout_mask, log_softmax, lstm_backward, lstm_forward, matvec, matvec_t_acc,
    outer_acc, LstmCache, LstmCellParams, Mode, ParamSet, Real, Tensor,
};
use crate::vocab::{TokenId, BOS, EOS};

pub const INIT_SCALE: Real = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub dropout_p: Real,
    pub max_decode_len: usize,
}

impl ModelConfig {
    /// 500-d embeddings, 800-unit LSTMs, 4 layers per stack, dropout 0.3.
    pub fn paper(src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        ModelConfig {
            emb_dim: 500,
            hidden_dim: 800,
            num_layers: 4,
            src_vocab_size,
            tgt_vocab_size,
            dropout_p: 0.3,
            max_decode_len: 100,
        }
    }

    pub fn desk(src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        ModelConfig {
            emb_dim: 32,
            hidden_dim: 64,
            num_layers: 2,
            src_vocab_size,
            tgt_vocab_size,
            dropout_p: 0.3,
            max_decode_len: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.emb_dim,
            self.hidden_dim,
            self.num_layers,
            self.src_vocab_size,
            self.tgt_vocab_size,
            self.max_decode_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Invalid(format!("model dimensions must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub src_emb: Tensor,
    pub tgt_emb: Tensor,
    pub enc_fwd: Vec<LstmCellParams>,
    pub enc_bwd: Vec<LstmCellParams>,
    pub key_proj: Tensor,
    pub bridge_h: Vec<Tensor>,
    pub bridge_c: Vec<Tensor>,
    pub dec: Vec<LstmCellParams>,
    pub w_a: Tensor,
    pub w_c: Tensor,
    pub w_s: Tensor,
    pub b_s: Tensor,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (e, h, l) = (cfg.emb_dim, cfg.hidden_dim, cfg.num_layers);
        let stack = |first_in: usize| {
            (0..l)
                .map(|i| LstmCellParams::zeros(if i == 0 { first_in } else { h }, h))
                .collect::<Vec<_>>()
        };
        ModelParams {
            src_emb: Tensor::zeros(&[cfg.src_vocab_size, e]),
            tgt_emb: Tensor::zeros(&[cfg.tgt_vocab_size, e]),
            enc_fwd: stack(e),
            enc_bwd: stack(e),
            key_proj: Tensor::zeros(&[h, 2 * h]),
            bridge_h: (0..l).map(|_| Tensor::zeros(&[h, 2 * h])).collect(),
            bridge_c: (0..l).map(|_| Tensor::zeros(&[h, 2 * h])).collect(),
            dec: stack(e + h),
            w_a: Tensor::zeros(&[h, h]),
            w_c: Tensor::zeros(&[h, 2 * h]),
            w_s: Tensor::zeros(&[cfg.tgt_vocab_size, h]),
            b_s: Tensor::zeros(&[cfg.tgt_vocab_size]),
        }
    }

    /// Uniform in `[-0.1, 0.1]` everywhere, forget-gate biases 1.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(cfg);
        for t in p.tensors_mut() {
            *t = Tensor::uniform(t.shape(), INIT_SCALE, &mut rng);
        }
        let h = cfg.hidden_dim;
        for cell in p.enc_fwd.iter_mut().chain(p.enc_bwd.iter_mut()).chain(p.dec.iter_mut()) {
            cell.b.data_mut()[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.w_a.rows()
    }
}

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("src_emb".to_owned(), &self.src_emb), ("tgt_emb".to_owned(), &self.tgt_emb)];
        for (i, c) in self.enc_fwd.iter().enumerate() {
            c.named(&format!("enc_fwd.{i}"), &mut v);
        }
        for (i, c) in self.enc_bwd.iter().enumerate() {
            c.named(&format!("enc_bwd.{i}"), &mut v);
        }
        v.push(("key_proj".to_owned(), &self.key_proj));
        for (i, t) in self.bridge_h.iter().enumerate() {
            v.push((format!("bridge_h.{i}"), t));
        }
        for (i, t) in self.bridge_c.iter().enumerate() {
            v.push((format!("bridge_c.{i}"), t));
        }
        for (i, c) in self.dec.iter().enumerate() {
            c.named(&format!("dec.{i}"), &mut v);
        }
        v.push(("w_a".to_owned(), &self.w_a));
        v.push(("w_c".to_owned(), &self.w_c));
        v.push(("w_s".to_owned(), &self.w_s));
        v.push(("b_s".to_owned(), &self.b_s));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.src_emb, &mut self.tgt_emb];
        for c in self.enc_fwd.iter_mut() {
            c.push_mut(&mut v);
        }
        for c in self.enc_bwd.iter_mut() {
            c.push_mut(&mut v);
        }
        v.push(&mut self.key_proj);
        v.extend(self.bridge_h.iter_mut());
        v.extend(self.bridge_c.iter_mut());
        for c in self.dec.iter_mut() {
            c.push_mut(&mut v);
        }
        v.push(&mut self.w_a);
        v.push(&mut self.w_c);
        v.push(&mut self.w_s);
        v.push(&mut self.b_s);
        v
    }
}

/// Dropout source for one example in train mode.
pub struct Dropout<'a> {
    pub p: Real,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, n: usize) -> Vec<Real> {
        dropout_mask(n, self.p, self.rng)
    }
}

fn apply_mask(x: &[Real], mask: Option<&Vec<Real>>) -> Vec<Real> {
    match mask {
        Some(m) => x.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => x.to_vec(),
    }
}

fn mul_mask(g: &mut [Real], mask: Option<&Vec<Real>>) {
    if let Some(m) = mask {
        g.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
    }
}

fn concat(a: &[Real], b: &[Real]) -> Vec<Real> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// A stack of LSTM layers run over a whole sequence, layer by layer.
struct StackRun {
    outputs: Vec<Vec<Real>>,
    final_h: Vec<Vec<Real>>,
    final_c: Vec<Vec<Real>>,
    caches: Vec<Vec<LstmCache>>,
    /// masks[l][t] for the input of layer l (l >= 1)
    masks: Vec<Vec<Option<Vec<Real>>>>,
}

fn stack_forward(layers: &[LstmCellParams], inputs: &[Vec<Real>], mut drop: Option<&mut Dropout>) -> StackRun {
    let mut cur = inputs.to_vec();
    let mut run = StackRun {
        outputs: Vec::new(),
        final_h: Vec::new(),
        final_c: Vec::new(),
        caches: Vec::new(),
        masks: Vec::new(),
    };
    for (l, cell) in layers.iter().enumerate() {
        let hd = cell.hidden();
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut caches = Vec::with_capacity(cur.len());
        let mut masks = Vec::with_capacity(cur.len());
        let mut next = Vec::with_capacity(cur.len());
        for x in &cur {
            let mask = match (&mut drop, l) {
                (Some(d), l) if l > 0 => Some(d.mask(x.len())),
                _ => None,
            };
            let xin = apply_mask(x, mask.as_ref());
            let (h2, c2, cache) = lstm_forward(cell, &xin, &h, &c);
            caches.push(cache);
            masks.push(mask);
            next.push(h2.clone());
            h = h2;
            c = c2;
        }
        run.final_h.push(h);
        run.final_c.push(c);
        run.caches.push(caches);
        run.masks.push(masks);
        cur = next;
    }
    run.outputs = cur;
    run
}

/// Returns gradients w.r.t. the stack inputs.
fn stack_backward(
    layers: &[LstmCellParams],
    run: &StackRun,
    mut d_out: Vec<Vec<Real>>,
    d_final_h: &[Vec<Real>],
    d_final_c: &[Vec<Real>],
    grads: &mut [LstmCellParams],
) -> Vec<Vec<Real>> {
    for l in (0..layers.len()).rev() {
        let mut dh_next = d_final_h[l].clone();
        let mut dc_next = d_final_c[l].clone();
        let n = run.caches[l].len();
        let mut d_in = vec![Vec::new(); n];
        for t in (0..n).rev() {
            let mut dh = d_out[t].clone();
            axpy(1.0, &dh_next, &mut dh);
            let (mut dx, dhp, dcp) = lstm_backward(&layers[l], &run.caches[l][t], &dh, &dc_next, &mut grads[l]);
            mul_mask(&mut dx, run.masks[l][t].as_ref());
            d_in[t] = dx;
            dh_next = dhp;
            dc_next = dcp;
        }
        d_out = d_in;
    }
    d_out
}

#[derive(Debug, Clone)]
pub struct EncodedSource {
    /// `[fwd_top(s); bwd_top(s)]`, width 2·hidden.
    pub annotations: Vec<Vec<Real>>,
    /// Annotations projected to hidden width; attention runs over these.
    pub keys: Vec<Vec<Real>>,
    pub init_h: Vec<Vec<Real>>,
    pub init_c: Vec<Vec<Real>>,
}

impl EncodedSource {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }
}

struct EncoderRun {
    enc: EncodedSource,
    fwd: StackRun,
    bwd: StackRun,
    /// `[h_fwd_l; h_bwd_l]` and `[c_fwd_l; c_bwd_l]` per layer
    final_hcat: Vec<Vec<Real>>,
    final_ccat: Vec<Vec<Real>>,
}

fn check_ids(ids: &[TokenId], vocab: usize, side: &str) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Invalid(format!("{side} sequence is empty")));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
        return Err(Error::Range(format!("{side} id {bad} outside vocabulary of {vocab}")));
    }
    Ok(())
}

fn encode_run(p: &ModelParams, cfg: &ModelConfig, src: &[TokenId], mut drop: Option<&mut Dropout>) -> Result<EncoderRun> {
    check_ids(src, cfg.src_vocab_size, "source")?;
    let emb: Vec<Vec<Real>> = src.iter().map(|&i| p.src_emb.row(i as usize).to_vec()).collect();
    let fwd = stack_forward(&p.enc_fwd, &emb, drop.as_deref_mut());
    let rev: Vec<Vec<Real>> = emb.iter().rev().cloned().collect();
    let bwd = stack_forward(&p.enc_bwd, &rev, drop.as_deref_mut());
    let n = src.len();
    let h = cfg.hidden_dim;
    let annotations: Vec<Vec<Real>> = (0..n).map(|s| concat(&fwd.outputs[s], &bwd.outputs[n - 1 - s])).collect();
    let keys: Vec<Vec<Real>> = annotations
        .iter()
        .map(|a| {
            let mut k = vec![0.0; h];
            matvec(&p.key_proj, a, None, &mut k);
            k
        })
        .collect();
    if keys.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric("encoder annotations"));
    }
    let mut final_hcat = Vec::with_capacity(cfg.num_layers);
    let mut final_ccat = Vec::with_capacity(cfg.num_layers);
    let mut init_h = Vec::with_capacity(cfg.num_layers);
    let mut init_c = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let hc = concat(&fwd.final_h[l], &bwd.final_h[l]);
        let cc = concat(&fwd.final_c[l], &bwd.final_c[l]);
        let mut h0 = vec![0.0; h];
        matvec(&p.bridge_h[l], &hc, None, &mut h0);
        h0.iter_mut().for_each(|v| *v = v.tanh());
        let mut c0 = vec![0.0; h];
        matvec(&p.bridge_c[l], &cc, None, &mut c0);
        init_h.push(h0);
        init_c.push(c0);
        final_hcat.push(hc);
        final_ccat.push(cc);
    }
    Ok(EncoderRun {
        enc: EncodedSource {
            annotations,
            keys,
            init_h,
            init_c,
        },
        fwd,
        bwd,
        final_hcat,
        final_ccat,
    })
}

pub fn encode(p: &ModelParams, cfg: &ModelConfig, src: &[TokenId]) -> Result<EncodedSource> {
    Ok(encode_run(p, cfg, src, None)?.enc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Vec<Vec<Real>>,
    pub c: Vec<Vec<Real>>,
    /// Previous attentional vector `h̃`, fed back into the first layer.
    pub feed: Vec<Real>,
}

impl DecoderState {
    pub fn initial(enc: &EncodedSource) -> Self {
        DecoderState {
            h: enc.init_h.clone(),
            c: enc.init_c.clone(),
            feed: vec![0.0; enc.keys[0].len()],
        }
    }
}

struct StepCache {
    prev: TokenId,
    lstm: Vec<LstmCache>,
    masks: Vec<Option<Vec<Real>>>,
    h_top: Vec<Real>,
    q: Vec<Real>,
    attn: Vec<Real>,
    ch: Vec<Real>,
    htilde: Vec<Real>,
    out_mask: Option<Vec<Real>>,
    htilde_d: Vec<Real>,
}

fn step_forward(
    p: &ModelParams,
    enc: &EncodedSource,
    prev: TokenId,
    state: &DecoderState,
    mut drop: Option<&mut Dropout>,
) -> (Vec<Real>, DecoderState, StepCache) {
    let hd = p.hidden();
    let mut x = concat(p.tgt_emb.row(prev as usize), &state.feed);
    let mut new_h = Vec::with_capacity(p.dec.len());
    let mut new_c = Vec::with_capacity(p.dec.len());
    let mut lstm = Vec::with_capacity(p.dec.len());
    let mut masks = Vec::with_capacity(p.dec.len());
    for (l, cell) in p.dec.iter().enumerate() {
        let mask = match (&mut drop, l) {
            (Some(d), l) if l > 0 => Some(d.mask(x.len())),
            _ => None,
        };
        let xin = apply_mask(&x, mask.as_ref());
        let (h, c, cache) = lstm_forward(cell, &xin, &state.h[l], &state.c[l]);
        lstm.push(cache);
        masks.push(mask);
        x = h.clone();
        new_h.push(h);
        new_c.push(c);
    }
    let h_top = x;

    let mut q = vec![0.0; hd];
    matvec_t_acc(&p.w_a, &h_top, &mut q);
    let scores: Vec<Real> = enc.keys.iter().map(|k| dot(&q, k)).collect();
    let attn = nnet::softmax(&scores);
    let mut ctx = vec![0.0; hd];
    for (a, k) in attn.iter().zip(&enc.keys) {
        axpy(*a, k, &mut ctx);
    }
    let ch = concat(&ctx, &h_top);
    let mut htilde = vec![0.0; hd];
    matvec(&p.w_c, &ch, None, &mut htilde);
    htilde.iter_mut().for_each(|v| *v = v.tanh());
    let out_mask = drop.as_mut().map(|d| d.mask(hd));
    let htilde_d = apply_mask(&htilde, out_mask.as_ref());
    let mut logits = vec![0.0; p.w_s.rows()];
    matvec(&p.w_s, &htilde_d, Some(p.b_s.data()), &mut logits);

    let next = DecoderState {
        h: new_h,
        c: new_c,
        feed: htilde.clone(),
    };
    let cache = StepCache {
        prev,
        lstm,
        masks,
        h_top,
        q,
        attn,
        ch,
        htilde,
        out_mask,
        htilde_d,
    };
    (logits, next, cache)
}

/// One inference step: logits over the target vocabulary, attention
/// weights over source positions, and the successor state.
pub fn decode_step(
    p: &ModelParams,
    cfg: &ModelConfig,
    enc: &EncodedSource,
    prev: TokenId,
    state: &DecoderState,
) -> Result<(Vec<Real>, Vec<Real>, DecoderState)> {
    if prev as usize >= cfg.tgt_vocab_size {
        return Err(Error::Range(format!("target id {prev} outside vocabulary")));
    }
    let (logits, next, cache) = step_forward(p, enc, prev, state, None);
    if cache.attn.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("attention weights"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("output logits"));
    }
    Ok((logits, cache.attn, next))
}

/// Mean per-token negative log-likelihood of `tgt` (EOS appended) under
/// teacher forcing. Gradients of that mean are **added** into `grads`.
pub fn forward_backward(
    p: &ModelParams,
    cfg: &ModelConfig,
    src: &[TokenId],
    tgt: &[TokenId],
    drop: Option<&mut Dropout>,
    grads: &mut ModelParams,
) -> Result<Real> {
    forward_backward_weighted(p, cfg, src, tgt, drop, 1.0 / (tgt.len() + 1) as Real, grads)
}

/// Same loss, but the gradient added is that of `weight * summed NLL`.
pub fn forward_backward_weighted(
    p: &ModelParams,
    cfg: &ModelConfig,
    src: &[TokenId],
    tgt: &[TokenId],
    mut drop: Option<&mut Dropout>,
    weight: Real,
    grads: &mut ModelParams,
) -> Result<Real> {
    check_ids(tgt, cfg.tgt_vocab_size, "target")?;
    let run = encode_run(p, cfg, src, drop.as_deref_mut())?;
    let enc = &run.enc;
    let steps = tgt.len() + 1;
    let norm = weight;
    let hd = cfg.hidden_dim;

    let mut state = DecoderState::initial(enc);
    let mut caches = Vec::with_capacity(steps);
    let mut dlogits_all = Vec::with_capacity(steps);
    let mut loss = 0.0;
    for t in 0..steps {
        let prev = if t == 0 { BOS } else { tgt[t - 1] };
        let gold = if t < tgt.len() { tgt[t] } else { EOS };
        let (logits, next, cache) = step_forward(p, enc, prev, &state, drop.as_deref_mut());
        let (l, mut g) = nnet::softmax_xent(&logits, gold as usize)
            .map_err(|_| Error::numeric(format!("decoder logits at step {t}")))?;
        loss += l;
        g.iter_mut().for_each(|v| *v *= norm);
        dlogits_all.push(g);
        caches.push(cache);
        state = next;
    }

    let n = enc.len();
    let mut dkeys = vec![vec![0.0; hd]; n];
    let mut dfeed = vec![0.0; hd];
    let mut dh_next: Vec<Vec<Real>> = vec![vec![0.0; hd]; cfg.num_layers];
    let mut dc_next: Vec<Vec<Real>> = vec![vec![0.0; hd]; cfg.num_layers];
    for t in (0..steps).rev() {
        let c = &caches[t];
        let dlogits = &dlogits_all[t];
        outer_acc(&mut grads.w_s, dlogits, &c.htilde_d);
        axpy(1.0, dlogits, grads.b_s.data_mut());
        let mut dht = vec![0.0; hd];
        matvec_t_acc(&p.w_s, dlogits, &mut dht);
        mul_mask(&mut dht, c.out_mask.as_ref());
        axpy(1.0, &dfeed, &mut dht);

        let dz: Vec<Real> = dht.iter().zip(&c.htilde).map(|(g, h)| g * (1.0 - h * h)).collect();
        outer_acc(&mut grads.w_c, &dz, &c.ch);
        let mut dch = vec![0.0; 2 * hd];
        matvec_t_acc(&p.w_c, &dz, &mut dch);
        let (dctx, dh_attn) = dch.split_at(hd);

        let da: Vec<Real> = enc.keys.iter().map(|k| dot(dctx, k)).collect();
        let mean_da: Real = c.attn.iter().zip(&da).map(|(a, d)| a * d).sum();
        let mut dq = vec![0.0; hd];
        for s in 0..n {
            axpy(c.attn[s], dctx, &mut dkeys[s]);
            let de = c.attn[s] * (da[s] - mean_da);
            axpy(de, &enc.keys[s], &mut dq);
            axpy(de, &c.q, &mut dkeys[s]);
        }
        let mut dh_top = dh_attn.to_vec();
        matvec(&p.w_a, &dq, None, &mut dh_top);
        axpy(1.0, dh_attn, &mut dh_top);
        outer_acc(&mut grads.w_a, &c.h_top, &dq);

        let mut dh_above = dh_top;
        for l in (0..cfg.num_layers).rev() {
            axpy(1.0, &dh_next[l], &mut dh_above);
            let (mut dx, dhp, dcp) = lstm_backward(&p.dec[l], &c.lstm[l], &dh_above, &dc_next[l], &mut grads.dec[l]);
            mul_mask(&mut dx, c.masks[l].as_ref());
            dh_next[l] = dhp;
            dc_next[l] = dcp;
            dh_above = dx;
        }
        let (demb, df) = dh_above.split_at(cfg.emb_dim);
        axpy(1.0, demb, grads.tgt_emb.row_mut(c.prev as usize));
        dfeed = df.to_vec();
    }

    // Bridge: dh_next/dc_next now hold gradients w.r.t. the initial states.
    let mut dfh: Vec<Vec<Real>> = Vec::with_capacity(cfg.num_layers);
    let mut dbh: Vec<Vec<Real>> = Vec::with_capacity(cfg.num_layers);
    let mut dfc: Vec<Vec<Real>> = Vec::with_capacity(cfg.num_layers);
    let mut dbc: Vec<Vec<Real>> = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let dz: Vec<Real> = dh_next[l]
            .iter()
            .zip(&enc.init_h[l])
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        outer_acc(&mut grads.bridge_h[l], &dz, &run.final_hcat[l]);
        let mut dhc = vec![0.0; 2 * hd];
        matvec_t_acc(&p.bridge_h[l], &dz, &mut dhc);
        outer_acc(&mut grads.bridge_c[l], &dc_next[l], &run.final_ccat[l]);
        let mut dcc = vec![0.0; 2 * hd];
        matvec_t_acc(&p.bridge_c[l], &dc_next[l], &mut dcc);
        let (a, b) = dhc.split_at(hd);
        dfh.push(a.to_vec());
        dbh.push(b.to_vec());
        let (a, b) = dcc.split_at(hd);
        dfc.push(a.to_vec());
        dbc.push(b.to_vec());
    }

    let mut d_fwd_top = Vec::with_capacity(n);
    let mut d_bwd_top = vec![Vec::new(); n];
    for s in 0..n {
        outer_acc(&mut grads.key_proj, &dkeys[s], &enc.annotations[s]);
        let mut dann = vec![0.0; 2 * hd];
        matvec_t_acc(&p.key_proj, &dkeys[s], &mut dann);
        let (a, b) = dann.split_at(hd);
        d_fwd_top.push(a.to_vec());
        // the backward stack ran over the reversed sequence
        d_bwd_top[n - 1 - s] = b.to_vec();
    }
    let d_emb_fwd = stack_backward(&p.enc_fwd, &run.fwd, d_fwd_top, &dfh, &dfc, &mut grads.enc_fwd);
    let d_emb_bwd = stack_backward(&p.enc_bwd, &run.bwd, d_bwd_top, &dbh, &dbc, &mut grads.enc_bwd);
    for s in 0..n {
        let row = grads.src_emb.row_mut(src[s] as usize);
        axpy(1.0, &d_emb_fwd[s], row);
        axpy(1.0, &d_emb_bwd[n - 1 - s], row);
    }

    Ok(loss / steps as Real)
}

/// Loss and freshly allocated gradients for one pair.
pub fn training_loss(
    p: &ModelParams,
    cfg: &ModelConfig,
    src: &[TokenId],
    tgt: &[TokenId],
    mode: Mode,
    seed: u64,
) -> Result<(Real, ModelParams)> {
    let mut grads = ModelParams::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop = Dropout { p: cfg.dropout_p, rng: &mut rng };
    let d = (mode == Mode::Train && cfg.dropout_p > 0.0).then_some(&mut drop);
    let loss = forward_backward(p, cfg, src, tgt, d, &mut grads)?;
    Ok((loss, grads))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[Real]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(p: &ModelParams, cfg: &ModelConfig, src: &[TokenId]) -> Result<Vec<TokenId>> {
    let enc = encode(p, cfg, src)?;
    let mut state = DecoderState::initial(&enc);
    let mut prev = BOS;
    let mut out = Vec::new();
    for _ in 0..cfg.max_decode_len {
        let (logits, _, next) = decode_step(p, cfg, &enc, prev, &state)?;
        let tok = argmax(&logits) as TokenId;
        if tok == EOS {
            break;
        }
        out.push(tok);
        prev = tok;
        state = next;
    }
    Ok(out)
}

/// Sum of log-probabilities of `out` (followed by EOS when `finished`).
pub fn sequence_logprob(
    p: &ModelParams,
    cfg: &ModelConfig,
    src: &[TokenId],
    out: &[TokenId],
    finished: bool,
) -> Result<Real> {
    let enc = encode(p, cfg, src)?;
    let mut state = DecoderState::initial(&enc);
    let mut prev = BOS;
    let mut total = 0.0;
    let tail = finished.then_some(EOS);
    for tok in out.iter().copied().chain(tail) {
        let (logits, _, next) = decode_step(p, cfg, &enc, prev, &state)?;
        total += log_softmax(&logits)[tok as usize];
        prev = tok;
        state = next;
    }
    Ok(total)
}

/// `logprob / len^alpha`, where `len` counts the EOS when emitted.
pub fn normalized_score(logprob: Real, len: usize, alpha: Real) -> Real {
    if alpha == 0.0 {
        logprob
    } else {
        logprob / (len.max(1) as Real).powf(alpha)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub logprob: Real,
    /// Ended with EOS (rather than hitting `max_decode_len`).
    pub finished: bool,
}

impl Hypothesis {
    pub fn scored_len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn score(&self, alpha: Real) -> Real {
        normalized_score(self.logprob, self.scored_len(), alpha)
    }
}

/// Beam search over summed log-probabilities. The greedy path is always a
/// candidate, so the result never scores below greedy decoding.
pub fn beam_search(
    p: &ModelParams,
    cfg: &ModelConfig,
    src: &[TokenId],
    beam_size: usize,
    alpha: Real,
) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::Invalid("beam size must be at least 1".into()));
    }
    let enc = encode(p, cfg, src)?;
    let mut alive: Vec<(Hypothesis, DecoderState)> = vec![(
        Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
            finished: false,
        },
        DecoderState::initial(&enc),
    )];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_decode_len {
        if alive.is_empty() || finished.len() >= beam_size {
            break;
        }
        let mut cands: Vec<(Real, usize, TokenId)> = Vec::new();
        let mut nexts = Vec::with_capacity(alive.len());
        for (hi, (hyp, state)) in alive.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let (logits, _, next) = decode_step(p, cfg, &enc, prev, state)?;
            let lp = log_softmax(&logits);
            cands.extend(lp.iter().enumerate().map(|(v, l)| (hyp.logprob + l, hi, v as TokenId)));
            nexts.push(next);
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam_size);
        let mut new_alive = Vec::with_capacity(cands.len());
        for (score, hi, tok) in cands {
            let mut tokens = alive[hi].0.tokens.clone();
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens,
                    logprob: score,
                    finished: true,
                });
            } else {
                tokens.push(tok);
                new_alive.push((
                    Hypothesis {
                        tokens,
                        logprob: score,
                        finished: false,
                    },
                    nexts[hi].clone(),
                ));
            }
        }
        alive = new_alive;
    }
    // hypotheses cut off by the length limit
    finished.extend(alive.into_iter().map(|(h, _)| h).filter(|h| h.tokens.len() >= cfg.max_decode_len));

    let greedy = greedy_decode(p, cfg, src)?;
    let greedy_finished = greedy.len() < cfg.max_decode_len;
    let greedy_lp = sequence_logprob(p, cfg, src, &greedy, greedy_finished)?;
    let mut best = Hypothesis {
        tokens: greedy,
        logprob: greedy_lp,
        finished: greedy_finished,
    };
    for h in finished {
        if h.score(alpha) > best.score(alpha) {
            best = h;
        }
    }
    Ok(best)
}

pub fn beam_decode(
    p: &ModelParams,
    cfg: &ModelConfig,
    src: &[TokenId],
    beam_size: usize,
    length_norm_alpha: Real,
) -> Result<Vec<TokenId>> {
    Ok(beam_search(p, cfg, src, beam_size, length_norm_alpha)?.tokens)
}

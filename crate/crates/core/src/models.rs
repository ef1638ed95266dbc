//! BiLSTM definition encoder with the endpoint (MC) head and the
//! correspondence heads: max-pooling, mean-pooling and sememe attention.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{InputSequence, SequenceOptions};
use crate::error::{Error, Result};
use crate::gradcore::{xavier_uniform, Axis, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Mc,
    Scorp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pooling {
    Max,
    Mean,
    Attention,
}

/// A point of the model lattice: architecture, pooling and retrofitting flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Mode {
    pub arch: Arch,
    pub pool: Pooling,
    pub tw: bool,
    pub se: bool,
    /// Subword splitting for OOV target words; only meaningful with `tw`.
    pub ws: bool,
}

impl Mode {
    pub fn mc() -> Self {
        Mode {
            arch: Arch::Mc,
            pool: Pooling::Max,
            tw: false,
            se: false,
            ws: true,
        }
    }

    pub fn scorp(pool: Pooling) -> Self {
        Mode {
            arch: Arch::Scorp,
            pool,
            ..Self::mc()
        }
    }

    pub fn with_tw(mut self, tw: bool) -> Self {
        self.tw = tw;
        self
    }

    pub fn with_se(mut self, se: bool) -> Self {
        self.se = se;
        self
    }

    pub fn with_ws(mut self, ws: bool) -> Self {
        self.ws = ws;
        self
    }

    pub fn sequence_options(&self) -> SequenceOptions {
        SequenceOptions {
            tw: self.tw,
            se: self.se,
            ws: self.ws,
        }
    }

    pub fn has_correspondence(&self) -> bool {
        self.arch == Arch::Scorp && self.pool != Pooling::Attention
    }

    /// File-name friendly form, e.g. `scorp_tw_se_max`.
    pub fn slug(&self) -> String {
        let mut s = String::from(match self.arch {
            Arch::Mc => "mc",
            Arch::Scorp => "scorp",
        });
        if self.tw {
            s.push_str("_tw");
            if !self.ws {
                s.push_str("_nows");
            }
        }
        if self.se {
            s.push_str("_se");
        }
        if self.arch == Arch::Scorp {
            s.push('_');
            s.push_str(pool_name(self.pool));
        }
        s
    }
}

fn pool_name(p: Pooling) -> &'static str {
    match p {
        Pooling::Max => "max",
        Pooling::Mean => "mean",
        Pooling::Attention => "attn",
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.arch {
            Arch::Mc => "mc",
            Arch::Scorp => "scorp",
        })?;
        if self.tw {
            f.write_str(" +tw")?;
            if !self.ws {
                f.write_str(" -ws")?;
            }
        }
        if self.se {
            f.write_str(" +se")?;
        }
        if self.arch == Arch::Scorp {
            write!(f, " pool={}", pool_name(self.pool))?;
        }
        Ok(())
    }
}

impl FromStr for Mode {
    type Err = Error;

    /// Accepts `mc` or `scorp` followed by any of `+tw`, `+se`, `-ws`,
    /// `pool=max|mean|attn`, separated by spaces or commas or run together
    /// (`scorp+tw+se`). Case-insensitive.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_lowercase();
        let mut words: Vec<String> = Vec::new();
        for chunk in lower.split(|c: char| c.is_whitespace() || c == ',' || c == '(' || c == ')') {
            let mut cur = String::new();
            for c in chunk.chars() {
                if (c == '+' || c == '-') && !cur.is_empty() && !cur.ends_with('=') {
                    words.push(std::mem::take(&mut cur));
                }
                cur.push(c);
            }
            if !cur.is_empty() {
                words.push(cur);
            }
        }
        let bad = || Error::InvalidMode(s.to_string());
        let mut it = words.into_iter();
        let mut mode = match it.next().as_deref() {
            Some("mc") => Mode::mc(),
            Some("scorp") => Mode::scorp(Pooling::Max),
            _ => return Err(bad()),
        };
        let mut pool_given = false;
        for w in it {
            match w.as_str() {
                "+tw" => mode.tw = true,
                "+se" => mode.se = true,
                "-ws" => mode.ws = false,
                "+ws" => mode.ws = true,
                p if p.starts_with("pool=") => {
                    pool_given = true;
                    mode.pool = match &p[5..] {
                        "max" => Pooling::Max,
                        "mean" => Pooling::Mean,
                        "attn" => Pooling::Attention,
                        _ => return Err(bad()),
                    };
                }
                _ => return Err(bad()),
            }
        }
        if mode.arch == Arch::Mc && pool_given {
            return Err(bad());
        }
        // Subword splitting only applies to the +TW prefix; keep one canonical value otherwise.
        if !mode.tw {
            mode.ws = true;
        }
        Ok(mode)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Word (and sememe) embedding dimension.
    pub input_dim: usize,
    /// Hidden size of each LSTM direction.
    pub hidden: usize,
    pub num_sememes: usize,
}

#[derive(Clone, Copy, Debug)]
struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

/// Trainable arrays plus their handles.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    fwd: LstmIds,
    bwd: LstmIds,
    proj_w: ParamId,
    proj_b: ParamId,
    sememe_emb: ParamId,
    attn_query: ParamId,
}

pub const PARAM_NAMES: [&str; 10] = [
    "lstm_fwd.w_ih",
    "lstm_fwd.w_hh",
    "lstm_fwd.b",
    "lstm_bwd.w_ih",
    "lstm_bwd.w_hh",
    "lstm_bwd.b",
    "proj.w",
    "proj.b",
    "sememe_emb",
    "attn.query",
];

fn expected_shapes(c: &ModelConfig) -> [Vec<usize>; 10] {
    let (d, h, s) = (c.input_dim, c.hidden, c.num_sememes);
    [
        vec![4 * h, d],
        vec![4 * h, h],
        vec![4 * h],
        vec![4 * h, d],
        vec![4 * h, h],
        vec![4 * h],
        vec![s, 2 * h],
        vec![s],
        vec![s, d],
        vec![2 * h, d],
    ]
}

/// Output of one forward pass.
pub struct Forward {
    /// Pooled sememe scores, `|S|` values.
    pub logits: Var,
    /// Correspondence scores `[max_len, |S|]` for the max/mean heads.
    pub correspondence: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMatrix {
    /// `|S| × |D|` scores over the real (unpadded) tokens.
    pub scores: Tensor,
    /// Per sememe, the token index attaining the max.
    pub argmax: Vec<usize>,
    /// Pooled score per sememe as produced by the model head.
    pub pooled: Vec<f64>,
}

/// Encoder input for one entry, possibly right-padded.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    /// `max_len × dim`, row-major; rows past `len` are padding.
    pub vectors: &'a [f64],
    pub dim: usize,
    pub len: usize,
    pub max_len: usize,
    /// One sememe-id group per real token (empty group = no +SE term).
    pub sememe_groups: &'a [Vec<usize>],
}

impl<'a> EncoderInput<'a> {
    pub fn mask(&self) -> Vec<bool> {
        (0..self.max_len).map(|i| i < self.len).collect()
    }
}

/// Flattened single-sequence storage for [`EncoderInput`].
pub struct OwnedInput {
    pub vectors: Vec<f64>,
    pub dim: usize,
    pub len: usize,
    pub sememe_groups: Vec<Vec<usize>>,
}

impl OwnedInput {
    pub fn from_sequence(seq: &InputSequence) -> Self {
        OwnedInput {
            vectors: seq.vectors.concat(),
            dim: seq.dim(),
            len: seq.len(),
            sememe_groups: seq.sememe_groups.clone(),
        }
    }

    pub fn view(&self) -> EncoderInput<'_> {
        EncoderInput {
            vectors: &self.vectors,
            dim: self.dim,
            len: self.len,
            max_len: self.len,
            sememe_groups: &self.sememe_groups,
        }
    }
}

impl Model {
    /// Seeded initialization: Xavier-uniform weights, zero biases, forget-gate bias 1.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, s) = (config.input_dim, config.hidden, config.num_sememes);
        let mut params = ParamStore::new();
        let lstm = |params: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| {
            let w_ih = params.add(format!("{prefix}.w_ih"), xavier_uniform(4 * h, d, rng));
            let w_hh = params.add(format!("{prefix}.w_hh"), xavier_uniform(4 * h, h, rng));
            let mut bias = vec![0.0; 4 * h];
            bias[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
            let b = params.add(format!("{prefix}.b"), Tensor::vector(bias));
            LstmIds { w_ih, w_hh, b }
        };
        let fwd = lstm(&mut params, "lstm_fwd", &mut rng);
        let bwd = lstm(&mut params, "lstm_bwd", &mut rng);
        let proj_w = params.add("proj.w", xavier_uniform(s, 2 * h, &mut rng));
        let proj_b = params.add("proj.b", Tensor::vector(vec![0.0; s]));
        let sememe_emb = params.add("sememe_emb", xavier_uniform(s, d, &mut rng));
        let attn_query = params.add("attn.query", xavier_uniform(2 * h, d, &mut rng));
        Model {
            config,
            params,
            fwd,
            bwd,
            proj_w,
            proj_b,
            sememe_emb,
            attn_query,
        }
    }

    /// Wraps loaded arrays, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let shapes = expected_shapes(&config);
        let mut ids = Vec::with_capacity(PARAM_NAMES.len());
        for (name, shape) in PARAM_NAMES.iter().zip(shapes.iter()) {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "from_params",
                    format!("`{name}` has shape {:?}, expected {shape:?}", params.get(id).shape()),
                ));
            }
            ids.push(id);
        }
        let lstm = |o: usize| LstmIds {
            w_ih: ids[o],
            w_hh: ids[o + 1],
            b: ids[o + 2],
        };
        Ok(Model {
            config,
            fwd: lstm(0),
            bwd: lstm(3),
            proj_w: ids[6],
            proj_b: ids[7],
            sememe_emb: ids[8],
            attn_query: ids[9],
            params,
        })
    }

    pub fn sememe_embeddings(&self) -> &Tensor {
        self.params.get(self.sememe_emb)
    }

    pub fn proj_w_id(&self) -> ParamId {
        self.proj_w
    }

    pub fn proj_b_id(&self) -> ParamId {
        self.proj_b
    }

    pub fn sememe_emb_id(&self) -> ParamId {
        self.sememe_emb
    }

    /// Encoder inputs with the +SE term when `se` is set.
    fn input_matrix(&self, g: &mut Graph<'_>, input: &EncoderInput<'_>, se: bool) -> Result<Var> {
        if input.dim != self.config.input_dim {
            return Err(Error::shape(
                "bilstm_forward",
                format!("input dim {} vs configured {}", input.dim, self.config.input_dim),
            ));
        }
        if input.len == 0 || input.len > input.max_len {
            return Err(Error::shape("bilstm_forward", format!("length {}", input.len)));
        }
        let x = g.constant(Tensor::matrix(
            input.len,
            input.dim,
            input.vectors[..input.len * input.dim].to_vec(),
        )?);
        let groups = &input.sememe_groups[..input.len.min(input.sememe_groups.len())];
        if se && groups.iter().any(|grp| !grp.is_empty()) {
            if groups.len() != input.len {
                return Err(Error::shape("bilstm_forward", "one sememe group per token required"));
            }
            let table = g.param(self.sememe_emb);
            let extra = g.gather_mean(table, groups)?;
            return g.add(x, extra);
        }
        Ok(x)
    }

    fn lstm_pass(&self, g: &mut Graph<'_>, ids: LstmIds, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let h = self.config.hidden;
        let len = g.value(x).rows();
        let w_ih = g.param(ids.w_ih);
        let w_hh = g.param(ids.w_hh);
        let b = g.param(ids.b);
        let xw = g.matmul_bt(x, w_ih)?;
        let xw = g.add(xw, b)?;
        let mut out = vec![None; len];
        let mut state: Option<(Var, Var)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        };
        for t in order {
            let mut pre = g.slice(xw, Axis::Rows, t, 1)?;
            if let Some((h_prev, _)) = state {
                let rec = g.matmul_bt(h_prev, w_hh)?;
                pre = g.add(pre, rec)?;
            }
            let act = g.sigmoid(pre);
            let i = g.slice(act, Axis::Cols, 0, h)?;
            let f = g.slice(act, Axis::Cols, h, h)?;
            let o = g.slice(act, Axis::Cols, 3 * h, h)?;
            let cand = g.slice(pre, Axis::Cols, 2 * h, h)?;
            let cand = g.tanh(cand);
            let mut c = g.mul(i, cand)?;
            if let Some((_, c_prev)) = state {
                let keep = g.mul(f, c_prev)?;
                c = g.add(c, keep)?;
            }
            let tc = g.tanh(c);
            let h_t = g.mul(o, tc)?;
            out[t] = Some(h_t);
            state = Some((h_t, c));
        }
        Ok(out.into_iter().map(|v| v.expect("every step visited")).collect())
    }

    /// `[len, 2h]` concatenated forward/backward states, dropout applied when training.
    pub fn bilstm_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        input: &EncoderInput<'_>,
        se: bool,
        dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let x = self.input_matrix(g, input, se)?;
        let fwd = self.lstm_pass(g, self.fwd, x, false)?;
        let bwd = self.lstm_pass(g, self.bwd, x, true)?;
        let hf = g.concat(&fwd, Axis::Rows)?;
        let hb = g.concat(&bwd, Axis::Rows)?;
        let h = g.concat(&[hf, hb], Axis::Cols)?;
        Ok(g.dropout(h, dropout, train, rng))
    }

    /// Appends zero rows so `h` has `max_len` rows.
    fn pad(&self, g: &mut Graph<'_>, h: Var, max_len: usize) -> Result<Var> {
        let (len, cols) = g.value(h).dims2();
        if max_len == len {
            return Ok(h);
        }
        let zeros = g.constant(Tensor::zeros(&[max_len - len, cols]));
        g.concat(&[h, zeros], Axis::Rows)
    }

    /// `W · concat(→h_last, ←h_first) + b`.
    pub fn mc_score(&self, g: &mut Graph<'_>, h: Var, len: usize) -> Result<Var> {
        let hid = self.config.hidden;
        let last = g.slice(h, Axis::Rows, len - 1, 1)?;
        let last_fwd = g.slice(last, Axis::Cols, 0, hid)?;
        let first = g.slice(h, Axis::Rows, 0, 1)?;
        let first_bwd = g.slice(first, Axis::Cols, hid, hid)?;
        let v = g.concat(&[last_fwd, first_bwd], Axis::Cols)?;
        let w = g.param(self.proj_w);
        let b = g.param(self.proj_b);
        let x = g.matmul_bt(v, w)?;
        g.add(x, b)
    }

    /// `Y` with row `i` equal to `W h_i + b`, shape `[rows(h), |S|]`.
    pub fn correspondence(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let w = g.param(self.proj_w);
        let b = g.param(self.proj_b);
        let y = g.matmul_bt(h, w)?;
        g.add(y, b)
    }

    /// Max over tokens of the correspondence scores. Returns `(pooled, Y)`.
    pub fn scorp_score(&self, g: &mut Graph<'_>, h: Var, mask: &[bool]) -> Result<(Var, Var)> {
        let y = self.correspondence(g, h)?;
        let pooled = g.masked_max(y, Axis::Rows, Some(mask))?;
        Ok((pooled, y))
    }

    /// Mean over unmasked tokens of the correspondence scores. Returns `(pooled, Y)`.
    pub fn mean_pool_score(&self, g: &mut Graph<'_>, h: Var, mask: &[bool]) -> Result<(Var, Var)> {
        let y = self.correspondence(g, h)?;
        let pooled = g.masked_mean(y, Axis::Rows, Some(mask))?;
        Ok((pooled, y))
    }

    /// Attention weights `[|S|, rows(h)]`: masked softmax of scaled `(Q s_j)ᵀ h_i`.
    pub fn attention_weights(&self, g: &mut Graph<'_>, h: Var, mask: &[bool]) -> Result<Var> {
        let s = g.param(self.sememe_emb);
        let q = g.param(self.attn_query);
        let queries = g.matmul_bt(s, q)?;
        let logits = g.matmul_bt(queries, h)?;
        let logits = g.scale(logits, 1.0 / ((2 * self.config.hidden) as f64).sqrt());
        g.softmax(logits, Axis::Cols, Some(mask))
    }

    /// Per sememe, `W_j · (Σ_i α_ji h_i) + b_j`.
    pub fn attention_score(&self, g: &mut Graph<'_>, h: Var, mask: &[bool]) -> Result<Var> {
        let alpha = self.attention_weights(g, h, mask)?;
        let ctx = g.matmul(alpha, h)?;
        let w = g.param(self.proj_w);
        let b = g.param(self.proj_b);
        let weighted = g.mul(ctx, w)?;
        let x = g.sum(weighted, Axis::Cols);
        g.add(x, b)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        input: &EncoderInput<'_>,
        mode: Mode,
        dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        let h = self.bilstm_forward(g, input, mode.se, dropout, train, rng)?;
        if mode.arch == Arch::Mc {
            return Ok(Forward {
                logits: self.mc_score(g, h, input.len)?,
                correspondence: None,
            });
        }
        let h = self.pad(g, h, input.max_len)?;
        let mask = input.mask();
        Ok(match mode.pool {
            Pooling::Max => {
                let (x, y) = self.scorp_score(g, h, &mask)?;
                Forward {
                    logits: x,
                    correspondence: Some(y),
                }
            }
            Pooling::Mean => {
                let (x, y) = self.mean_pool_score(g, h, &mask)?;
                Forward {
                    logits: x,
                    correspondence: Some(y),
                }
            }
            Pooling::Attention => Forward {
                logits: self.attention_score(g, h, &mask)?,
                correspondence: None,
            },
        })
    }

    /// Eval-mode sememe scores for one sequence.
    pub fn score(&self, seq: &InputSequence, mode: Mode) -> Result<Vec<f64>> {
        let input = OwnedInput::from_sequence(seq);
        self.score_input(&input.view(), mode)
    }

    pub fn score_input(&self, input: &EncoderInput<'_>, mode: Mode) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, input, mode, 0.0, false, &mut rng)?;
        Ok(g.value(out.logits).data().to_vec())
    }

    /// Eval-mode correspondence matrix; errors for modes without one.
    pub fn correspondence_matrix(&self, seq: &InputSequence, mode: Mode) -> Result<CorrespondenceMatrix> {
        if !mode.has_correspondence() {
            return Err(Error::NoCorrespondence(mode.to_string()));
        }
        let input = OwnedInput::from_sequence(seq);
        let view = input.view();
        let mut g = Graph::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &view, mode, 0.0, false, &mut rng)?;
        let y = g.value(out.correspondence.expect("scorp head"));
        let (len, s) = y.dims2();
        let mut scores = Vec::with_capacity(s * len);
        for j in 0..s {
            for i in 0..len {
                scores.push(y.get(i, j));
            }
        }
        let scores = Tensor::matrix(s, len, scores)?;
        let argmax = (0..s)
            .map(|j| {
                let row = scores.row(j);
                (0..len).fold(0, |best, i| if row[i] > row[best] { i } else { best })
            })
            .collect();
        Ok(CorrespondenceMatrix {
            scores,
            argmax,
            pooled: g.value(out.logits).data().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Gradients;

    fn tiny(d: usize, h: usize, s: usize, seed: u64) -> Model {
        Model::new(
            ModelConfig {
                input_dim: d,
                hidden: h,
                num_sememes: s,
            },
            seed,
        )
    }

    fn random_input(len: usize, d: usize, seed: u64) -> OwnedInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        OwnedInput {
            vectors: (0..len * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            dim: d,
            len,
            sememe_groups: vec![Vec::new(); len],
        }
    }

    fn encode(m: &Model, input: &OwnedInput) -> Tensor {
        let mut g = Graph::new(&m.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = m
            .bilstm_forward(&mut g, &input.view(), false, 0.0, false, &mut rng)
            .unwrap();
        g.value(h).clone()
    }

    #[test]
    fn mode_parsing_and_display() {
        let m: Mode = "SCorP +TW +se pool=mean".parse().unwrap();
        assert_eq!(m, Mode::scorp(Pooling::Mean).with_tw(true).with_se(true));
        assert_eq!(m.to_string(), "scorp +tw +se pool=mean");
        assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        let m: Mode = "scorp+tw-ws".parse().unwrap();
        assert_eq!(m, Mode::scorp(Pooling::Max).with_tw(true).with_ws(false));
        assert_eq!("mc".parse::<Mode>().unwrap(), Mode::mc());
        assert!("mc pool=max".parse::<Mode>().is_err());
        assert!("lstm".parse::<Mode>().is_err());
        assert!("scorp pool=sum".parse::<Mode>().is_err());
        assert_eq!(m.slug(), "scorp_tw_nows_max");
        assert_eq!("scorp -ws".parse::<Mode>().unwrap(), Mode::scorp(Pooling::Max));
    }

    #[test]
    fn zero_weights_and_inputs_give_zero_states() {
        let mut m = tiny(4, 3, 2, 1);
        for id in m.params.ids().collect::<Vec<_>>() {
            m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let input = OwnedInput {
            vectors: vec![0.0; 5 * 4],
            dim: 4,
            len: 5,
            sememe_groups: vec![Vec::new(); 5],
        };
        let h = encode(&m, &input);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_contract() {
        let m = tiny(6, 5, 3, 2);
        let h = encode(&m, &random_input(7, 6, 3));
        assert_eq!(h.shape(), &[7, 10]);
        let bad = random_input(3, 5, 3);
        let mut g = Graph::new(&m.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m
            .bilstm_forward(&mut g, &bad.view(), false, 0.0, false, &mut rng)
            .is_err());
    }

    #[test]
    fn direction_symmetry_with_shared_weights() {
        let mut m = tiny(4, 3, 2, 5);
        let src = m.params.clone();
        for part in ["w_ih", "w_hh", "b"] {
            let f = src.id(&format!("lstm_fwd.{part}")).unwrap();
            let b = src.id(&format!("lstm_bwd.{part}")).unwrap();
            let data = src.get(f).data().to_vec();
            m.params.get_mut(b).data_mut().copy_from_slice(&data);
        }
        let input = random_input(6, 4, 9);
        let mut reversed = input.vectors.chunks(4).rev().flatten().copied().collect::<Vec<_>>();
        let rev = OwnedInput {
            vectors: std::mem::take(&mut reversed),
            dim: 4,
            len: 6,
            sememe_groups: vec![Vec::new(); 6],
        };
        let h = encode(&m, &input);
        let hr = encode(&m, &rev);
        for i in 0..6 {
            assert_eq!(&h.row(i)[..3], &hr.row(5 - i)[3..]);
        }
    }

    #[test]
    fn mc_identity_projection_returns_v() {
        let mut m = tiny(3, 2, 4, 7);
        let w = m.proj_w_id();
        let eye: Vec<f64> = (0..16).map(|k| if k % 5 == 0 { 1.0 } else { 0.0 }).collect();
        m.params.get_mut(w).data_mut().copy_from_slice(&eye);
        let input = random_input(4, 3, 8);
        let h = encode(&m, &input);
        let mut g = Graph::new(&m.params);
        let hv = g.constant(h.clone());
        let x = m.mc_score(&mut g, hv, 4).unwrap();
        let v = [h.get(3, 0), h.get(3, 1), h.get(0, 2), h.get(0, 3)];
        assert_eq!(g.value(x).data(), &v);
    }

    #[test]
    fn mc_matches_hand_matvec_and_zero_h_gives_bias() {
        let mut m = tiny(3, 2, 3, 11);
        let b = m.proj_b_id();
        m.params.get_mut(b).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let h = encode(&m, &random_input(5, 3, 12));
        let w = m.params.get(m.proj_w_id()).clone();
        let v = [h.get(4, 0), h.get(4, 1), h.get(0, 2), h.get(0, 3)];
        let expected: Vec<f64> = (0..3)
            .map(|j| (0..4).map(|k| w.get(j, k) * v[k]).sum::<f64>() + [0.5, -1.0, 2.0][j])
            .collect();
        let mut g = Graph::new(&m.params);
        let hv = g.constant(h);
        let x = m.mc_score(&mut g, hv, 5).unwrap();
        for (a, e) in g.value(x).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-14);
        }
        let z = g.constant(Tensor::zeros(&[5, 4]));
        let x = m.mc_score(&mut g, z, 5).unwrap();
        assert_eq!(g.value(x).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn scorp_and_mean_hand_cases() {
        // W = I (2 sememes, 2h = 2), b = 0, so Y rows are the h rows.
        let mut m = tiny(2, 1, 2, 1);
        let w = m.proj_w_id();
        m.params.get_mut(w).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::new(&m.params);
        // tokens as rows: Y = [[1,3],[2,0]] means sememe 0 scores (1,3), sememe 1 scores (2,0)
        let h = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 0.0]).unwrap());
        let (x, _) = m.scorp_score(&mut g, h, &[true, true]).unwrap();
        assert_eq!(g.value(x).data(), &[3.0, 2.0]);
        assert_eq!(g.argmax(x).unwrap(), &[1, 0]);
        let (x, _) = m.mean_pool_score(&mut g, h, &[true, true]).unwrap();
        assert_eq!(g.value(x).data(), &[2.0, 1.0]);
        let (x, _) = m.mean_pool_score(&mut g, h, &[false, true]).unwrap();
        assert_eq!(g.value(x).data(), &[3.0, 0.0]);
        assert!(m.scorp_score(&mut g, h, &[false, false]).is_err());
        assert!(m.attention_score(&mut g, h, &[false, false]).is_err());
    }

    #[test]
    fn single_token_heads_agree() {
        let m = tiny(4, 3, 5, 21);
        let input = random_input(1, 4, 22);
        let scores = |mode: Mode| m.score_input(&input.view(), mode).unwrap();
        let max = scores(Mode::scorp(Pooling::Max));
        assert_eq!(max, scores(Mode::scorp(Pooling::Mean)));
        let attn = scores(Mode::scorp(Pooling::Attention));
        for (a, b) in attn.iter().zip(&max) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(max, scores(Mode::mc()));
    }

    #[test]
    fn attention_weights_sum_to_one_and_uniform_keys() {
        let m = tiny(4, 3, 5, 31);
        let h = encode(&m, &random_input(6, 4, 32));
        let mut g = Graph::new(&m.params);
        let hv = g.constant(h);
        let mask = [true, true, false, true, true, true];
        let a = m.attention_weights(&mut g, hv, &mask).unwrap();
        let a = g.value(a).clone();
        for j in 0..5 {
            assert!((a.row(j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(a.get(j, 2), 0.0);
        }
        let same = g.constant(Tensor::matrix(3, 2 * 3, [0.3, -0.2, 0.1, 0.5, 0.0, 0.7].repeat(3)).unwrap());
        let a = m.attention_weights(&mut g, same, &[true; 3]).unwrap();
        for v in g.value(a).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn padding_leaves_scores_bit_identical() {
        let m = tiny(4, 3, 5, 41);
        let base = random_input(5, 4, 42);
        for mode in [
            Mode::mc(),
            Mode::scorp(Pooling::Max),
            Mode::scorp(Pooling::Mean),
            Mode::scorp(Pooling::Attention),
        ] {
            let plain = m.score_input(&base.view(), mode).unwrap();
            for extra in 1..=10 {
                let mut vectors = base.vectors.clone();
                vectors.extend((0..extra * 4).map(|k| k as f64 * 0.37 - 1.0));
                let padded = EncoderInput {
                    vectors: &vectors,
                    dim: 4,
                    len: 5,
                    max_len: 5 + extra,
                    sememe_groups: &base.sememe_groups,
                };
                let s = m.score_input(&padded, mode).unwrap();
                assert_eq!(
                    s.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    plain.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    "{mode} with {extra} pads"
                );
            }
        }
    }

    #[test]
    fn max_dominates_mean_on_shared_y() {
        let m = tiny(4, 3, 6, 51);
        let h = encode(&m, &random_input(8, 4, 52));
        let mut g = Graph::new(&m.params);
        let hv = g.constant(h);
        let mask = [true; 8];
        let (mx, _) = m.scorp_score(&mut g, hv, &mask).unwrap();
        let (mn, _) = m.mean_pool_score(&mut g, hv, &mask).unwrap();
        for (a, b) in g.value(mx).data().iter().zip(g.value(mn).data()) {
            assert!(a >= b);
        }
    }

    #[test]
    fn gradient_check_every_mode() {
        let m = tiny(4, 3, 3, 61);
        let mut input = random_input(5, 4, 62);
        input.sememe_groups = vec![vec![0], vec![], vec![1, 2], vec![2], vec![]];
        let labels = [1.0, 0.0, 1.0];
        for arch_pool in [
            Mode::mc(),
            Mode::scorp(Pooling::Max),
            Mode::scorp(Pooling::Mean),
            Mode::scorp(Pooling::Attention),
        ] {
            for se in [false, true] {
                let mode = arch_pool.with_se(se);
                let report = crate::gradcore::grad_check(&m.params, 1e-5, 1e-4, |g| {
                    let mut rng = ChaCha8Rng::seed_from_u64(3);
                    let out = m.forward(g, &input.view(), mode, 0.0, false, &mut rng)?;
                    g.bce_with_logits(out.logits, &labels, false)
                })
                .unwrap();
                assert!(report.passed(), "{mode}: {report:#?}");
            }
        }
    }

    #[test]
    fn se_gradient_reaches_sememe_embeddings_only_when_enabled() {
        let m = tiny(4, 3, 3, 71);
        let mut input = random_input(3, 4, 72);
        input.sememe_groups = vec![vec![1], vec![], vec![]];
        let grad_norm = |mode: Mode| {
            let mut g = Graph::new(&m.params);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = m.forward(&mut g, &input.view(), mode, 0.0, false, &mut rng).unwrap();
            let l = g.bce_with_logits(out.logits, &[1.0, 0.0, 0.0], false).unwrap();
            let mut grads = Gradients::zeros_like(&m.params);
            g.backward(l, &mut grads).unwrap();
            grads.get(m.sememe_emb_id()).iter().map(|v| v.abs()).sum::<f64>()
        };
        assert_eq!(grad_norm(Mode::scorp(Pooling::Max)), 0.0);
        assert!(grad_norm(Mode::scorp(Pooling::Max).with_se(true)) > 0.0);
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = tiny(4, 3, 3, 1);
        let cfg = ModelConfig {
            num_sememes: 4,
            ..m.config
        };
        assert!(Model::from_params(cfg, m.params.clone()).is_err());
        assert!(Model::from_params(m.config, m.params.clone()).is_ok());
    }
}

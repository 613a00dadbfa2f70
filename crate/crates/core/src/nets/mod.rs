//! Learnable building blocks: convolutional feature extractors, linear
//! heads, and the recurrent / pooling fusion of patch features.
//!
//! Every function here is a pure composition of tape operations over
//! parameters held in a [`ParamStore`].

pub mod checkpoint;

use rand::Rng;

use crate::numerics::{xavier_uniform, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PADDING: usize = 1;

#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// A stack of stride-2 3×3 conv + relu blocks followed by global average
/// pooling. The first block takes a single channel.
#[derive(Clone, Debug)]
pub struct ExtractorParams {
    pub blocks: Vec<ConvBlock>,
    pub out_dim: usize,
}

impl ExtractorParams {
    /// `channels` lists the output width of each block; the last entry is `d`.
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, channels: &[usize]) -> Self {
        assert!(!channels.is_empty() && !channels.contains(&0));
        let mut blocks = Vec::with_capacity(channels.len());
        let mut c_in = 1;
        for (i, &c_out) in channels.iter().enumerate() {
            let shape = [c_out, c_in, KERNEL, KERNEL];
            let w = xavier_uniform(rng, &shape, c_in * KERNEL * KERNEL, c_out * KERNEL * KERNEL);
            let weight = store.add(format!("{prefix}.conv{i}.weight"), w);
            let bias = store.add(format!("{prefix}.conv{i}.bias"), Tensor::zeros(&[c_out]));
            blocks.push(ConvBlock { weight, bias });
            c_in = c_out;
        }
        Self {
            blocks,
            out_dim: *channels.last().unwrap(),
        }
    }

    /// Input sides must be multiples of this.
    pub fn total_stride(&self) -> usize {
        STRIDE.pow(self.blocks.len() as u32)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| [b.weight, b.bias]).collect()
    }
}

/// Maps an `H×W×1` image to a length-`d` feature vector.
pub fn extract(tape: &mut Tape, store: &ParamStore, params: &ExtractorParams, image: Var) -> Result<Var, NumericsError> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 || shape[2] != 1 {
        return Err(NumericsError::Shape(format!(
            "extractor expects an H x W x 1 image, got {shape:?}"
        )));
    }
    let stride = params.total_stride();
    if shape[0] % stride != 0 || shape[1] % stride != 0 {
        return Err(NumericsError::Shape(format!(
            "image sides {}x{} must be multiples of {stride}",
            shape[0], shape[1]
        )));
    }
    let mut x = tape.reshape(image, &[1, shape[0], shape[1]])?;
    for block in &params.blocks {
        let w = tape.param(store, block.weight);
        let b = tape.param(store, block.bias);
        let y = tape.conv2d(x, w, b, STRIDE, PADDING)?;
        x = tape.relu(y);
    }
    tape.global_avg_pool(x)
}

/// Applies [`extract`] to every patch, preserving order.
pub fn extract_patch_features(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ExtractorParams,
    patches: &[Var],
) -> Result<Vec<Var>, NumericsError> {
    if patches.is_empty() {
        return Err(NumericsError::Usage("no patches to extract".into()));
    }
    patches.iter().map(|&p| extract(tape, store, params, p)).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct LinearHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl LinearHead {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, out_dim: usize, in_dim: usize) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            xavier_uniform(rng, &[out_dim, in_dim], in_dim, out_dim),
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            out_dim,
            in_dim,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    /// `softmax(A x + b)`.
    pub fn distribution(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let len = tape.shape(x).to_vec();
        if len != [self.in_dim] {
            return Err(NumericsError::Shape(format!(
                "head expects a vector of length {}, got {len:?}",
                self.in_dim
            )));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let logits = tape.affine(w, x, b)?;
        tape.softmax(logits)
    }
}

/// Class distribution from image-level features (`n × d` head).
pub fn classify_lowres(tape: &mut Tape, store: &ParamStore, head: &LinearHead, v: Var) -> Result<Var, NumericsError> {
    head.distribution(tape, store, v)
}

/// Distribution over the `P` patch positions (`P × d` head).
pub fn attention_distribution(
    tape: &mut Tape,
    store: &ParamStore,
    head: &LinearHead,
    v: Var,
) -> Result<Var, NumericsError> {
    head.distribution(tape, store, v)
}

/// Class distribution from the fused multi-scale vector (`n × 2d` head).
pub fn classify_highres(tape: &mut Tape, store: &ParamStore, head: &LinearHead, m: Var) -> Result<Var, NumericsError> {
    head.distribution(tape, store, m)
}

#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub dim: usize,
}

impl GruParams {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, dim: usize) -> Self {
        let mut mat = |name: &str, rng: &mut R| {
            store.add(format!("{prefix}.{name}"), xavier_uniform(rng, &[dim, dim], dim, dim))
        };
        let w_z = mat("w_z", rng);
        let u_z = mat("u_z", rng);
        let w_r = mat("w_r", rng);
        let u_r = mat("u_r", rng);
        let w_h = mat("w_h", rng);
        let u_h = mat("u_h", rng);
        let b_z = store.add(format!("{prefix}.b_z"), Tensor::zeros(&[dim]));
        let b_r = store.add(format!("{prefix}.b_r"), Tensor::zeros(&[dim]));
        let b_h = store.add(format!("{prefix}.b_h"), Tensor::zeros(&[dim]));
        Self {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
            dim,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h, self.b_h,
        ]
    }

    /// One recurrence step:
    /// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
    /// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, h: Var, x: Var) -> Result<Var, NumericsError> {
        for (what, v) in [("hidden state", h), ("input", x)] {
            if tape.shape(v) != [self.dim] {
                return Err(NumericsError::Shape(format!(
                    "GRU {what} has shape {:?}, expected [{}]",
                    tape.shape(v),
                    self.dim
                )));
            }
        }
        let p = |tape: &mut Tape, id| tape.param(store, id);
        let (w_z, u_z, b_z) = (p(tape, self.w_z), p(tape, self.u_z), p(tape, self.b_z));
        let (w_r, u_r, b_r) = (p(tape, self.w_r), p(tape, self.u_r), p(tape, self.b_r));
        let (w_h, u_h, b_h) = (p(tape, self.w_h), p(tape, self.u_h), p(tape, self.b_h));

        let zx = tape.affine(w_z, x, b_z)?;
        let zh = matvec(tape, u_z, h)?;
        let z_pre = tape.add(zx, zh)?;
        let z = tape.sigmoid(z_pre);

        let rx = tape.affine(w_r, x, b_r)?;
        let rh = matvec(tape, u_r, h)?;
        let r_pre = tape.add(rx, rh)?;
        let r = tape.sigmoid(r_pre);

        let rh = tape.mul(r, h)?;
        let cx = tape.affine(w_h, x, b_h)?;
        let ch = matvec(tape, u_h, rh)?;
        let c_pre = tape.add(cx, ch)?;
        let candidate = tape.tanh(c_pre);

        let neg_z = tape.neg(z);
        let keep = tape.offset(neg_z, 1.0);
        let kept = tape.mul(keep, h)?;
        let fresh = tape.mul(z, candidate)?;
        tape.add(kept, fresh)
    }

    /// Runs the recurrence over `inputs` from `h0`, returning the final state.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, h0: Var, inputs: &[Var]) -> Result<Var, NumericsError> {
        if inputs.is_empty() {
            return Err(NumericsError::Usage("GRU needs at least one input".into()));
        }
        inputs.iter().try_fold(h0, |h, &x| self.step(tape, store, h, x))
    }
}

fn matvec(tape: &mut Tape, w: Var, x: Var) -> Result<Var, NumericsError> {
    let n = tape.shape(x)[0];
    let col = tape.reshape(x, &[n, 1])?;
    let y = tape.matmul(w, col)?;
    let m = tape.shape(y)[0];
    tape.reshape(y, &[m])
}

/// GRU seeded with `v`, fed the patch features in order; returns `concat(h_K, v)`.
pub fn gru_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    gru: &GruParams,
    v: Var,
    features: &[Var],
) -> Result<Var, NumericsError> {
    let h = gru.run(tape, store, v, features)?;
    tape.concat(&[h, v])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Average,
    Max,
}

/// Elementwise mean or max of the patch features (order-free).
pub fn pool_features(tape: &mut Tape, mode: PoolMode, features: &[Var]) -> Result<Var, NumericsError> {
    if features.is_empty() {
        return Err(NumericsError::Usage("no features to pool".into()));
    }
    match mode {
        PoolMode::Average => {
            let mut acc = features[0];
            for &f in &features[1..] {
                acc = tape.add(acc, f)?;
            }
            Ok(tape.scale(acc, 1.0 / features.len() as f64))
        }
        PoolMode::Max => tape.elementwise_max(features),
    }
}

/// Pooled patch features concatenated with `v`.
pub fn fuse_pool(tape: &mut Tape, mode: PoolMode, v: Var, features: &[Var]) -> Result<Var, NumericsError> {
    let pooled = pool_features(tape, mode, features)?;
    if tape.shape(pooled) != tape.shape(v) {
        return Err(NumericsError::Shape(format!(
            "pooled features {:?} and image features {:?} differ",
            tape.shape(pooled),
            tape.shape(v)
        )));
    }
    tape.concat(&[pooled, v])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn extractor_output_has_width_d() {
        let mut store = ParamStore::new();
        let ex = ExtractorParams::init(&mut store, &mut rng(), "x", &[8, 16, 32]);
        for side in [8, 16, 32, 64] {
            let mut t = Tape::new();
            let img = t.constant(Tensor::filled(&[side, side, 1], 0.3));
            let v = extract(&mut t, &store, &ex, img).unwrap();
            assert_eq!(t.shape(v), &[32]);
        }
    }

    #[test]
    fn extractor_rejects_bad_inputs() {
        let mut store = ParamStore::new();
        let ex = ExtractorParams::init(&mut store, &mut rng(), "x", &[4, 4]);
        let mut t = Tape::new();
        let two_channel = t.constant(Tensor::zeros(&[8, 8, 2]));
        assert!(matches!(extract(&mut t, &store, &ex, two_channel), Err(NumericsError::Shape(_))));
        let odd = t.constant(Tensor::zeros(&[6, 8, 1]));
        assert!(matches!(extract(&mut t, &store, &ex, odd), Err(NumericsError::Shape(_))));
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let mut store = ParamStore::new();
        let ex = ExtractorParams::init(&mut store, &mut rng(), "x", &[8, 16, 32]);
        let mut t = Tape::new();
        let img = t.constant(Tensor::zeros(&[32, 32, 1]));
        let v = extract(&mut t, &store, &ex, img).unwrap();
        assert!(t.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut store = ParamStore::new();
        let head = LinearHead::init(&mut store, &mut rng(), "h", 4, 6);
        store.value_mut(head.weight).data_mut().fill(0.0);
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(&[0.3, 1.0, -2.0, 0.0, 5.0, 1.0]));
        let p = classify_lowres(&mut t, &store, &head, v).unwrap();
        assert!(t.value(p).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_class_head_is_certain() {
        let mut store = ParamStore::new();
        let head = LinearHead::init(&mut store, &mut rng(), "h", 1, 3);
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(&[0.3, 1.0, -2.0]));
        let p = attention_distribution(&mut t, &store, &head, v).unwrap();
        assert_eq!(t.value(p).data(), &[1.0]);
    }

    #[test]
    fn head_dimension_mismatch() {
        let mut store = ParamStore::new();
        let head = LinearHead::init(&mut store, &mut rng(), "h", 4, 6);
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(&[0.0; 5]));
        assert!(matches!(classify_highres(&mut t, &store, &head, v), Err(NumericsError::Shape(_))));
    }

    #[test]
    fn zero_gru_halves_the_seed() {
        let mut store = ParamStore::new();
        let gru = GruParams::init(&mut store, &mut rng(), "g", 3);
        for id in gru.param_ids() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let v_vals = [0.4, -1.2, 2.0];
        let v = t.constant(Tensor::vector(&v_vals));
        let x = t.constant(Tensor::vector(&[9.0, 9.0, 9.0]));
        let m = gru_fuse(&mut t, &store, &gru, v, &[x]).unwrap();
        let expect: Vec<f64> = v_vals.iter().map(|x| 0.5 * x).chain(v_vals).collect();
        assert_eq!(t.value(m).data(), expect.as_slice());
    }

    #[test]
    fn pooling_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(&[1.0, 3.0]));
        let b = t.constant(Tensor::vector(&[3.0, 1.0]));
        let v = t.constant(Tensor::vector(&[7.0, 8.0]));
        let avg = fuse_pool(&mut t, PoolMode::Average, v, &[a, b]).unwrap();
        assert_eq!(t.value(avg).data(), &[2.0, 2.0, 7.0, 8.0]);
        let max = fuse_pool(&mut t, PoolMode::Max, v, &[a, b]).unwrap();
        assert_eq!(t.value(max).data(), &[3.0, 3.0, 7.0, 8.0]);
        assert!(matches!(fuse_pool(&mut t, PoolMode::Max, v, &[]), Err(NumericsError::Usage(_))));
    }

    #[test]
    fn empty_patch_set_is_usage_error() {
        let mut store = ParamStore::new();
        let ex = ExtractorParams::init(&mut store, &mut rng(), "x", &[4]);
        let mut t = Tape::new();
        assert!(matches!(
            extract_patch_features(&mut t, &store, &ex, &[]),
            Err(NumericsError::Usage(_))
        ));
    }
}

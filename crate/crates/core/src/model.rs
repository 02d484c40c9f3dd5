//! Tiny encoder-decoder depth network.
//!
//! Three stride-2 3x3 conv + ELU stages (3 -> c -> 2c -> 4c), a decoder of
//! nearest 2x upsampling, skip concatenation and 3x3 conv + ELU, and a
//! sigmoid head mapped to depth through the disparity range
//! `[1/max_depth, 1/min_depth]`.

use std::io::{Read, Write};
use std::path::Path;

use dh_tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"DHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const DEFAULT_MIN_DEPTH: f64 = 0.1;
pub const DEFAULT_MAX_DEPTH: f64 = 100.0;

/// Predicted depth in meters, `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub values: Tensor,
}

impl DepthMap {
    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthNet {
    base: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    params: Vec<Tensor>,
}

/// Parameters of a [`DepthNet`] bound to a tape.
#[derive(Clone, Debug)]
pub struct NetVars(Vec<Var>);

impl NetVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// `(out_channels, in_channels)` per conv layer, in parameter order.
fn layer_channels(base: usize) -> [(usize, usize); 7] {
    let (c1, c2, c3) = (base, 2 * base, 4 * base);
    [
        (c1, 3),
        (c2, c1),
        (c3, c2),
        (c2, c3 + c2),
        (c1, c2 + c1),
        (c1, c1 + 3),
        (1, c1),
    ]
}

fn param_shapes(base: usize) -> Vec<Vec<usize>> {
    layer_channels(base)
        .iter()
        .flat_map(|&(o, i)| [vec![o, i, 3, 3], vec![1, o, 1, 1]])
        .collect()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl DepthNet {
    /// Kaiming-uniform fan-in initialisation. The head bias is set so an
    /// untrained net predicts roughly `initial_depth` everywhere.
    pub fn new(seed: u64, base: usize, initial_depth: f64) -> Result<Self> {
        Self::with_range(seed, base, initial_depth, DEFAULT_MIN_DEPTH, DEFAULT_MAX_DEPTH)
    }

    pub fn with_range(seed: u64, base: usize, initial_depth: f64, min_depth: f64, max_depth: f64) -> Result<Self> {
        if base == 0 {
            return Err(Error::Config("network width must be positive".into()));
        }
        if !(min_depth > 0.0 && min_depth < max_depth && max_depth.is_finite()) {
            return Err(Error::Config(format!("invalid depth range [{min_depth}, {max_depth}]")));
        }
        if !(initial_depth > min_depth && initial_depth < max_depth) {
            return Err(Error::Config(format!(
                "initial depth {initial_depth} outside ({min_depth}, {max_depth})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = param_shapes(base);
        let last = shapes.len() - 2;
        let mut params = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            let t = if i % 2 == 0 {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let mut bound = (6.0 / fan_in).sqrt();
                if i == last {
                    bound *= 0.1;
                }
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
            } else if i == last + 1 {
                let (lo, hi) = (1.0 / max_depth, 1.0 / min_depth);
                Tensor::full(shape, logit((1.0 / initial_depth - lo) / (hi - lo)))
            } else {
                Tensor::zeros(shape)
            };
            params.push(t);
        }
        Ok(Self {
            base,
            min_depth,
            max_depth,
            params,
        })
    }

    pub fn base_width(&self) -> usize {
        self.base
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Record the parameters on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> NetVars {
        NetVars(
            self.params
                .iter()
                .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
                .collect(),
        )
    }

    /// Depth for `[3, H, W]` image `img`, as a `[1, H, W]` var.
    pub fn forward_on(&self, tape: &mut Tape, vars: &NetVars, img: Var) -> Result<Var> {
        let shape = tape.shape(img).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(TensorError::Shape(format!("depth net expects a [3,H,W] image, got {shape:?}")).into());
        }
        let (h, w) = (shape[1], shape[2]);
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(TensorError::Shape(format!("image extents {h}x{w} must be positive multiples of 8")).into());
        }
        let p = &vars.0;
        let x = tape.reshape(img, &[1, 3, h, w])?;
        let x = tape.add_scalar(x, -0.5);
        let layer = |tape: &mut Tape, input: Var, i: usize, stride: usize| -> Result<Var> {
            let y = tape.conv2d(input, p[2 * i], stride, 1)?;
            Ok(tape.add(y, p[2 * i + 1])?)
        };
        let e1 = layer(tape, x, 0, 2)?;
        let e1 = tape.elu(e1);
        let e2 = layer(tape, e1, 1, 2)?;
        let e2 = tape.elu(e2);
        let e3 = layer(tape, e2, 2, 2)?;
        let e3 = tape.elu(e3);

        let u3 = tape.upsample2x(e3)?;
        let c3 = tape.concat(&[u3, e2], 1)?;
        let d3 = layer(tape, c3, 3, 1)?;
        let d3 = tape.elu(d3);
        let u2 = tape.upsample2x(d3)?;
        let c2 = tape.concat(&[u2, e1], 1)?;
        let d2 = layer(tape, c2, 4, 1)?;
        let d2 = tape.elu(d2);
        let u1 = tape.upsample2x(d2)?;
        let c1 = tape.concat(&[u1, x], 1)?;
        let d1 = layer(tape, c1, 5, 1)?;
        let d1 = tape.elu(d1);
        let logits = layer(tape, d1, 6, 1)?;

        let sigma = tape.sigmoid(logits);
        let (lo, hi) = (1.0 / self.max_depth, 1.0 / self.min_depth);
        let disp = tape.scale(sigma, hi - lo);
        let disp = tape.add_scalar(disp, lo);
        let depth = tape.reciprocal(disp);
        Ok(tape.reshape(depth, &[1, h, w])?)
    }

    /// Inference without gradient bookkeeping on the parameters.
    pub fn forward(&self, img: &Tensor) -> Result<DepthMap> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let d = self.forward_on(&mut tape, &vars, x)?;
        Ok(DepthMap {
            values: tape.value(d).clone(),
        })
    }

    /// Depth corresponding to a head activation `sigma` in (0, 1).
    pub fn depth_from_sigma(&self, sigma: f64) -> f64 {
        let (lo, hi) = (1.0 / self.max_depth, 1.0 / self.min_depth);
        1.0 / (lo + (hi - lo) * sigma)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.base as u32).to_le_bytes());
        out.extend_from_slice(&self.min_depth.to_le_bytes());
        out.extend_from_slice(&self.max_depth.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            p.write_dump(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let base = read_u32(&mut r)? as usize;
        let min_depth = read_f64(&mut r)?;
        let max_depth = read_f64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        if base == 0 || base > 1024 {
            return Err(Error::Format(format!("implausible network width {base}")));
        }
        if !(min_depth > 0.0 && min_depth < max_depth && max_depth.is_finite()) {
            return Err(Error::Format(format!("invalid depth range [{min_depth}, {max_depth}]")));
        }
        let shapes = param_shapes(base);
        if count != shapes.len() {
            return Err(Error::Format(format!("expected {} parameter tensors, found {count}", shapes.len())));
        }
        let mut params = Vec::with_capacity(count);
        for shape in &shapes {
            let t = Tensor::read_dump(&mut r).map_err(|e| match e {
                TensorError::Format(m) => Error::Format(m),
                other => other.into(),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("parameter shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Format("non-finite parameter in checkpoint".into()));
            }
            params.push(t);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.len())));
        }
        Ok(Self {
            base,
            min_depth,
            max_depth,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Reads the whole file before parsing; nothing is returned on failure.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = tail;
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

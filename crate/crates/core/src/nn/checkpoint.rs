use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use super::model::{Gradients, ModelParams};
use super::spec::{NetworkSpec, Shape};
use crate::error::{Error, IoContext, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCNNCKPT";
const HEADER_LEN: usize = 8 + 32 + 4;

/// Model parameters and momentum buffers after `epoch` completed epochs.
///
/// Parameters and momentum are flattened in layer order, weights before bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub epoch: u32,
    pub params: Vec<f32>,
    pub momentum: Vec<f32>,
}

fn flatten<'a>(bufs: impl Iterator<Item = &'a [f32]>) -> Vec<f32> {
    bufs.flat_map(|b| b.iter().copied()).collect()
}

impl Checkpoint {
    pub fn capture(model: &ModelParams<f32>, momentum: &Gradients<f32>, epoch: u32) -> Self {
        Self {
            fingerprint: model.spec().fingerprint(model.input_shape()),
            epoch,
            params: flatten(model.buffers()),
            momentum: flatten(momentum.buffers()),
        }
    }

    /// Rebuilds the model and momentum; fails if `spec` does not match.
    pub fn restore(&self, spec: NetworkSpec, input: Shape) -> Result<(ModelParams<f32>, Gradients<f32>)> {
        let expected = spec.fingerprint(input);
        if expected != self.fingerprint {
            return Err(Error::Stale {
                path: "<checkpoint>".into(),
                expected: hex::encode(expected),
                found: hex::encode(self.fingerprint),
            });
        }
        let mut model = ModelParams::zeros(spec, input)?;
        if model.param_count() != self.params.len() || self.momentum.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} parameters, network needs {}",
                self.params.len(),
                model.param_count()
            )));
        }
        model.init.scheme = "checkpoint".into();
        let mut velocity = Gradients::zeros_like(&model);
        let mut off = 0;
        for buf in model.buffers_mut() {
            let n = buf.len();
            buf.copy_from_slice(&self.params[off..off + n]);
            off += n;
        }
        let mut off = 0;
        for l in &mut velocity.layers {
            for buf in [&mut l.weights, &mut l.bias] {
                let n = buf.len();
                buf.copy_from_slice(&self.momentum[off..off + n]);
                off += n;
            }
        }
        Ok((model, velocity))
    }

    pub fn encode(&self) -> Vec<u8> {
        let floats = self.params.len() + self.momentum.len();
        let mut out = vec![0u8; HEADER_LEN + 4 * floats];
        out[..8].copy_from_slice(CHECKPOINT_MAGIC);
        out[8..40].copy_from_slice(&self.fingerprint);
        LittleEndian::write_u32(&mut out[40..44], self.epoch);
        let (p, m) = out[HEADER_LEN..].split_at_mut(4 * self.params.len());
        LittleEndian::write_f32_into(&self.params, p);
        LittleEndian::write_f32_into(&self.momentum, m);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format("checkpoint", bytes.len() as u64, "truncated header"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", 0, "bad magic"));
        }
        let body = &bytes[HEADER_LEN..];
        if body.len() % 8 != 0 {
            return Err(Error::format(
                "checkpoint",
                (HEADER_LEN + body.len() / 8 * 8) as u64,
                "body is not two equal f32 buffers",
            ));
        }
        let half = body.len() / 2;
        let mut params = vec![0f32; half / 4];
        let mut momentum = vec![0f32; half / 4];
        LittleEndian::read_f32_into(&body[..half], &mut params);
        LittleEndian::read_f32_into(&body[half..], &mut momentum);
        Ok(Self {
            fingerprint: bytes[8..40].try_into().expect("32 bytes"),
            epoch: LittleEndian::read_u32(&bytes[40..44]),
            params,
            momentum,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).at(path)?)
    }
}

//! Binary network checkpoints.
//!
//! Layout, little-endian: magic `BGNET1`, `u8` model kind, `f64` kappa,
//! `u32` block count, then per block: `u8` block kind, `u32` width count,
//! `u32` widths, `u32` embedding frequencies, `f64` base frequency,
//! `f64` growth, `u64` parameter count and the raw `f64` parameters in layer
//! order.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use bridgegen_core::adjoint::ControlNet;
use bridgegen_core::nnet::{BridgeNet, DenoiserNet, LevelEmbedding, Mlp};

pub const MAGIC: &[u8; 6] = b"BGNET1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    PretrainDm,
    PretrainFm,
    Mbm,
    MbmppDm,
    MbmppFm,
    Am,
}

impl ModelKind {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Self::PretrainDm,
            1 => Self::PretrainFm,
            2 => Self::Mbm,
            3 => Self::MbmppDm,
            4 => Self::MbmppFm,
            5 => Self::Am,
            _ => bail!("unknown model kind {c}"),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Backbone(DenoiserNet),
    Bridge(BridgeNet),
    Control(ControlNet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub kappa: f64,
    pub blocks: Vec<Block>,
}

impl Checkpoint {
    pub fn backbone(&self) -> Result<&DenoiserNet> {
        self.blocks
            .iter()
            .find_map(|b| if let Block::Backbone(n) = b { Some(n) } else { None })
            .context("checkpoint has no backbone block")
    }

    pub fn bridge(&self) -> Result<&BridgeNet> {
        self.blocks
            .iter()
            .find_map(|b| if let Block::Bridge(n) = b { Some(n) } else { None })
            .context("checkpoint has no bridge block")
    }

    pub fn control(&self) -> Result<&ControlNet> {
        self.blocks
            .iter()
            .find_map(|b| if let Block::Control(n) = b { Some(n) } else { None })
            .context("checkpoint has no control block")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(self.kind.code());
        out.extend_from_slice(&self.kappa.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            let (code, mlp, embed) = match b {
                Block::Backbone(n) => (0u8, n.mlp(), Some(n.embedding())),
                Block::Bridge(n) => (1u8, n.mlp(), None),
                Block::Control(n) => (2u8, n.mlp(), Some(n.embedding())),
            };
            out.push(code);
            out.extend_from_slice(&(mlp.widths().len() as u32).to_le_bytes());
            for &w in mlp.widths() {
                out.extend_from_slice(&(w as u32).to_le_bytes());
            }
            let e = embed.unwrap_or(LevelEmbedding { n_freq: 0, base_freq: 0.0, growth: 0.0 });
            out.extend_from_slice(&(e.n_freq as u32).to_le_bytes());
            out.extend_from_slice(&e.base_freq.to_le_bytes());
            out.extend_from_slice(&e.growth.to_le_bytes());
            out.extend_from_slice(&(mlp.params().len() as u64).to_le_bytes());
            for p in mlp.params() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).context("truncated header")?;
        ensure!(&magic == MAGIC, "not a BGNET1 checkpoint");
        let kind = ModelKind::from_code(read_u8(&mut r)?)?;
        let kappa = read_f64(&mut r)?;
        let n_blocks = read_u32(&mut r)?;
        let mut blocks = Vec::with_capacity(n_blocks as usize);
        for _ in 0..n_blocks {
            let code = read_u8(&mut r)?;
            let nw = read_u32(&mut r)? as usize;
            ensure!(nw >= 2 && nw < 1024, "implausible layer count {nw}");
            let widths = (0..nw).map(|_| read_u32(&mut r).map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
            let embed = LevelEmbedding {
                n_freq: read_u32(&mut r)? as usize,
                base_freq: read_f64(&mut r)?,
                growth: read_f64(&mut r)?,
            };
            let np = read_u64(&mut r)? as usize;
            ensure!(np * 8 <= r.len(), "truncated parameter block");
            let params = (0..np).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            let mlp = Mlp::from_params(&widths, params)?;
            let dim = mlp.out_dim();
            blocks.push(match code {
                0 => Block::Backbone(DenoiserNet::from_parts(dim, embed, mlp)?),
                1 => Block::Bridge(BridgeNet::from_mlp(mlp)),
                2 => Block::Control(ControlNet::from_parts(dim, embed, mlp)?),
                _ => bail!("unknown block kind {code}"),
            });
        }
        ensure!(r.is_empty(), "trailing bytes after last block");
        Ok(Self { kind, kappa, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))
    }
}

fn read_u8(r: &mut &[u8]) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).context("truncated checkpoint")?;
    Ok(b[0])
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).context("truncated checkpoint")?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).context("truncated checkpoint")?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).context("truncated checkpoint")?;
    Ok(f64::from_le_bytes(b))
}

//! Binary file formats: the base-model checkpoint and the per-concept
//! transformation files. Layouts are documented in docs/FORMATS.md; all
//! integers and floats are little-endian, and writes are deterministic so
//! identical runs produce identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SteerError};
use crate::numerics::{Rng, Tensor};
use crate::schedule::ScheduleConfig;
use crate::scorenet::{ConceptVocabulary, NetworkConfig, ScoreNetwork};
use crate::steering::{Role, TransformKind, Transformation};

pub const NETWORK_MAGIC: &[u8; 8] = b"SLABNET\0";
pub const TRANSFORM_MAGIC: &[u8; 8] = b"SLABTRF\0";
pub const FORMAT_VERSION: u32 = 1;

// -- little-endian primitives -------------------------------------------------

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_string(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn put_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    put_u32(w, t.shape().len() as u32)?;
    for d in t.shape() {
        put_u64(w, *d as u64)?;
    }
    for v in t.data() {
        put_f64(w, *v)?;
    }
    Ok(())
}

fn take_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| SteerError::Format(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn take_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| SteerError::Format(format!("truncated file: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

fn take_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| SteerError::Format(format!("truncated file: {e}")))?;
    Ok(f64::from_le_bytes(buf))
}

fn take_string(r: &mut impl Read) -> Result<String> {
    let len = take_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(SteerError::Format(format!("string length {len} too large")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| SteerError::Format(format!("truncated string: {e}")))?;
    String::from_utf8(buf).map_err(|_| SteerError::Format("invalid utf-8".into()))
}

fn take_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rank = take_u32(r)? as usize;
    if rank > 4 {
        return Err(SteerError::Format(format!("tensor rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(take_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    if numel > 1 << 26 {
        return Err(SteerError::Format(format!("tensor with {numel} elements too large")));
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(take_f64(r)?);
    }
    Tensor::new(shape, data)
}

fn check_magic(r: &mut impl Read, expected: &[u8; 8], what: &str) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| SteerError::Format(format!("cannot read {what} magic: {e}")))?;
    if &buf != expected {
        return Err(SteerError::Format(format!("not a {what} file")));
    }
    let version = take_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(SteerError::Format(format!(
            "{what} format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

// -- base-model checkpoint ----------------------------------------------------

/// Write the base network plus the schedule parameters it was trained under.
pub fn save_network(net: &ScoreNetwork, sched: &ScheduleConfig, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| SteerError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| SteerError::io(path, e);

    w.write_all(NETWORK_MAGIC).map_err(io_err)?;
    put_u32(&mut w, FORMAT_VERSION).map_err(io_err)?;
    let cfg = net.config();
    put_u32(&mut w, cfg.data_dim as u32).map_err(io_err)?;
    put_u32(&mut w, cfg.bottleneck as u32).map_err(io_err)?;
    put_u32(&mut w, cfg.hidden as u32).map_err(io_err)?;
    put_u32(&mut w, cfg.prompt_dim as u32).map_err(io_err)?;
    put_u32(&mut w, cfg.time_dim as u32).map_err(io_err)?;
    put_u64(&mut w, sched.t_steps as u64).map_err(io_err)?;
    put_f64(&mut w, sched.beta_start).map_err(io_err)?;
    put_f64(&mut w, sched.beta_end).map_err(io_err)?;
    put_u64(&mut w, sched.k_steps as u64).map_err(io_err)?;

    // Vocabulary listing: categories with their concepts, then neutrals.
    let vocab = net.vocab();
    let cats = vocab.categories_map();
    put_u32(&mut w, cats.len() as u32).map_err(io_err)?;
    for (cat, concepts) in cats {
        put_string(&mut w, cat).map_err(io_err)?;
        put_string(&mut w, vocab.neutral_map()[cat].as_str()).map_err(io_err)?;
        put_u32(&mut w, concepts.len() as u32).map_err(io_err)?;
        for c in concepts {
            put_string(&mut w, c).map_err(io_err)?;
        }
    }

    put_u32(&mut w, net.store().len() as u32).map_err(io_err)?;
    for (_, p) in net.store().iter() {
        put_string(&mut w, &p.name).map_err(io_err)?;
        put_tensor(&mut w, &p.value).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read a checkpoint back into a network plus its schedule parameters.
pub fn load_network(path: &Path) -> Result<(ScoreNetwork, ScheduleConfig)> {
    let file = File::open(path).map_err(|e| SteerError::io(path, e))?;
    let mut r = BufReader::new(file);
    check_magic(&mut r, NETWORK_MAGIC, "network checkpoint")?;

    let config = NetworkConfig {
        data_dim: take_u32(&mut r)? as usize,
        bottleneck: take_u32(&mut r)? as usize,
        hidden: take_u32(&mut r)? as usize,
        prompt_dim: take_u32(&mut r)? as usize,
        time_dim: take_u32(&mut r)? as usize,
    };
    let sched = ScheduleConfig {
        t_steps: take_u64(&mut r)? as usize,
        beta_start: take_f64(&mut r)?,
        beta_end: take_f64(&mut r)?,
        k_steps: take_u64(&mut r)? as usize,
    };

    let n_cats = take_u32(&mut r)? as usize;
    let mut categories = std::collections::BTreeMap::new();
    let mut neutral = std::collections::BTreeMap::new();
    for _ in 0..n_cats {
        let cat = take_string(&mut r)?;
        let neu = take_string(&mut r)?;
        let n_concepts = take_u32(&mut r)? as usize;
        let mut concepts = Vec::with_capacity(n_concepts);
        for _ in 0..n_concepts {
            concepts.push(take_string(&mut r)?);
        }
        neutral.insert(cat.clone(), neu);
        categories.insert(cat, concepts);
    }
    let vocab = ConceptVocabulary::new(categories, neutral)?;

    let mut net = ScoreNetwork::new(config, vocab, &mut Rng::seed_from(0));
    let n_params = take_u32(&mut r)? as usize;
    if n_params != net.store().len() {
        return Err(SteerError::Format(format!(
            "checkpoint has {n_params} params, architecture expects {}",
            net.store().len()
        )));
    }
    let ids: Vec<_> = net.store().ids().collect();
    for id in ids {
        let name = take_string(&mut r)?;
        let value = take_tensor(&mut r)?;
        if net.store().get(id).name != name {
            return Err(SteerError::Format(format!(
                "unexpected param `{name}`, expected `{}`",
                net.store().get(id).name
            )));
        }
        net.store_mut()
            .set_value(id, value)
            .map_err(|_| SteerError::Format(format!("param `{name}` shape mismatch")))?;
    }
    Ok((net, sched))
}

// -- transformation files -----------------------------------------------------

fn kind_tag(kind: TransformKind) -> u8 {
    match kind {
        TransformKind::Constant => 0,
        TransformKind::Mlp => 1,
    }
}

fn role_tag(role: Role) -> u8 {
    match role {
        Role::Concept => 0,
        Role::Semantic => 1,
        Role::Shared => 2,
    }
}

/// Persist one transformation; round-trips are byte-exact.
pub fn save_transformation(t: &Transformation, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| SteerError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| SteerError::io(path, e);

    w.write_all(TRANSFORM_MAGIC).map_err(io_err)?;
    put_u32(&mut w, FORMAT_VERSION).map_err(io_err)?;
    w.write_all(&[kind_tag(t.kind()), role_tag(t.role())])
        .map_err(io_err)?;
    put_string(&mut w, t.concept()).map_err(io_err)?;
    put_u64(&mut w, t.h_dim() as u64).map_err(io_err)?;
    put_u64(&mut w, t.hidden() as u64).map_err(io_err)?;
    put_u32(&mut w, t.store().len() as u32).map_err(io_err)?;
    for (_, p) in t.store().iter() {
        put_string(&mut w, &p.name).map_err(io_err)?;
        put_tensor(&mut w, &p.value).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Load a transformation, checking format version and dimensions.
/// `expected_h` guards against loading into a mismatched bottleneck.
pub fn load_transformation(path: &Path, expected_h: Option<usize>) -> Result<Transformation> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            SteerError::MissingArtifact(path.display().to_string())
        } else {
            SteerError::io(path, e)
        }
    })?;
    let mut r = BufReader::new(file);
    check_magic(&mut r, TRANSFORM_MAGIC, "transformation")?;

    let mut tags = [0u8; 2];
    r.read_exact(&mut tags)
        .map_err(|e| SteerError::Format(format!("truncated file: {e}")))?;
    let kind = match tags[0] {
        0 => TransformKind::Constant,
        1 => TransformKind::Mlp,
        k => return Err(SteerError::Format(format!("unknown transformation kind {k}"))),
    };
    let role = match tags[1] {
        0 => Role::Concept,
        1 => Role::Semantic,
        2 => Role::Shared,
        k => return Err(SteerError::Format(format!("unknown role {k}"))),
    };
    let concept = take_string(&mut r)?;
    let h_dim = take_u64(&mut r)? as usize;
    let hidden = take_u64(&mut r)? as usize;
    if let Some(expected) = expected_h {
        if h_dim != expected {
            return Err(SteerError::Bottleneck {
                expected,
                got: h_dim,
            });
        }
    }
    let n_params = take_u32(&mut r)? as usize;
    let mut values = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = take_string(&mut r)?;
        let value = take_tensor(&mut r)?;
        values.push((name, value));
    }
    Transformation::from_parts(kind, role, concept, h_dim, hidden, values)
}

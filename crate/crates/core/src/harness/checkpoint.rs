//! Binary checkpoints of a [`DecomposedState`].
//!
//! Layout: the magic `APDC`, a little-endian `u32` version, then tagged
//! sections, each a 4-byte tag, a `u64` payload length and the payload. All
//! integers and floats are little-endian; floats are stored by bit pattern so
//! a round trip is exact. Task-adaptive deltas and locally-shared weights are
//! stored sparsely as `(u32 index, f64 value)` pairs with strictly increasing
//! indices.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ApdError, Result};
use crate::numeric::Activation;
use crate::params::{
    Architecture, DecomposedLayer, DecomposedState, Dense, GroupId, HistoryEntry, LocalShared,
    TaskId,
};

pub const MAGIC: &[u8; 4] = b"APDC";
pub const VERSION: u32 = 1;

const SECTIONS: [&[u8; 4]; 12] = [
    b"ARCH", b"SHRD", b"SNAP", b"TAUS", b"MASK", b"GRPS", b"ASGN", b"HEAD", b"RSTR", b"RNGS",
    b"HIST", b"MISC",
];

fn err(section: &str, reason: impl Into<String>) -> ApdError {
    ApdError::Checkpoint {
        section: section.to_string(),
        reason: reason.into(),
    }
}

#[derive(Default)]
struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn len32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("checkpoint block too large"));
    }
    fn dense(&mut self, d: &Dense) {
        d.values().for_each(|&v| self.f64(v));
    }
    fn sparse(&mut self, d: &Dense) {
        let nz: Vec<(usize, f64)> = d
            .values()
            .enumerate()
            .filter(|(_, v)| v.to_bits() != 0)
            .map(|(i, &v)| (i, v))
            .collect();
        self.len32(nz.len());
        for (i, v) in nz {
            self.len32(i);
            self.f64(v);
        }
    }
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> In<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(err(self.section, "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn count(&mut self, what: &str, max: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > max {
            return Err(err(self.section, format!("{what} count {n} exceeds {max}")));
        }
        Ok(n)
    }
    fn dense(&mut self, d_in: usize, d_out: usize) -> Result<Dense> {
        let mut d = Dense::zeros(d_in, d_out);
        for v in d.values_mut() {
            *v = self.f64()?;
        }
        Ok(d)
    }
    fn sparse(&mut self, d_in: usize, d_out: usize) -> Result<Dense> {
        let mut flat = vec![0.0; d_in * d_out + d_out];
        let nnz = self.count("nonzero", flat.len())?;
        let mut last: Option<usize> = None;
        for _ in 0..nnz {
            let i = self.u32()? as usize;
            if i >= flat.len() {
                return Err(err(self.section, format!("index {i} out of range {}", flat.len())));
            }
            if last.is_some_and(|l| i <= l) {
                return Err(err(self.section, "sparse indices not strictly increasing"));
            }
            last = Some(i);
            flat[i] = self.f64()?;
        }
        let mut d = Dense::zeros(d_in, d_out);
        d.assign_from(&flat);
        Ok(d)
    }
    fn task(&mut self) -> Result<TaskId> {
        Ok(TaskId(self.u32()?))
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(err(self.section, "trailing bytes"));
        }
        Ok(())
    }
}

fn section_name(tag: &[u8; 4]) -> &'static str {
    match tag {
        b"ARCH" => "ARCH",
        b"SHRD" => "SHRD",
        b"SNAP" => "SNAP",
        b"TAUS" => "TAUS",
        b"MASK" => "MASK",
        b"GRPS" => "GRPS",
        b"ASGN" => "ASGN",
        b"HEAD" => "HEAD",
        b"RSTR" => "RSTR",
        b"RNGS" => "RNGS",
        b"HIST" => "HIST",
        _ => "MISC",
    }
}

/// Serialises `state` into checkpoint bytes.
pub fn encode(state: &DecomposedState) -> Vec<u8> {
    let mut file = Out::default();
    file.0.extend_from_slice(MAGIC);
    file.u32(VERSION);
    let mut put = |tag: &[u8; 4], body: Out| {
        file.0.extend_from_slice(tag);
        file.u64(body.0.len() as u64);
        file.0.extend_from_slice(&body.0);
    };

    let arch = &state.arch;
    let mut b = Out::default();
    b.len32(arch.input_dim);
    b.len32(arch.hidden.len());
    arch.hidden.iter().for_each(|&h| b.len32(h));
    b.u8(arch.activation.code());
    b.u8(arch.adaptive_mask as u8);
    put(b"ARCH", b);

    let mut b = Out::default();
    state.layers.iter().for_each(|l| b.dense(&l.shared));
    put(b"SHRD", b);

    let mut b = Out::default();
    state.shared_snapshot.iter().for_each(|d| b.dense(d));
    put(b"SNAP", b);

    let tasks = state.tasks();
    let mut b = Out::default();
    b.len32(tasks.len());
    for t in &tasks {
        b.u32(t.0);
        state.layers.iter().for_each(|l| b.sparse(&l.adaptive[t]));
    }
    put(b"TAUS", b);

    let mut b = Out::default();
    b.len32(tasks.len());
    for t in &tasks {
        b.u32(t.0);
        for l in &state.layers {
            l.mask_logits[t].iter().for_each(|&v| b.f64(v));
        }
    }
    put(b"MASK", b);

    let mut b = Out::default();
    b.len32(state.groups.len());
    for (g, ls) in &state.groups {
        b.u32(g.0);
        ls.layers.iter().for_each(|d| b.sparse(d));
    }
    put(b"GRPS", b);

    let mut b = Out::default();
    b.len32(state.assignment.len());
    for (t, g) in &state.assignment {
        b.u32(t.0);
        b.u32(g.0);
    }
    put(b"ASGN", b);

    let mut b = Out::default();
    b.len32(tasks.len());
    for t in &tasks {
        let h = &state.heads[t];
        b.u32(t.0);
        b.len32(h.output_dim());
        b.dense(h);
    }
    put(b"HEAD", b);

    let mut b = Out::default();
    b.len32(state.restored.len());
    for (t, layers) in &state.restored {
        b.u32(t.0);
        layers.iter().for_each(|d| b.dense(d));
    }
    put(b"RSTR", b);

    let mut b = Out::default();
    b.0.extend_from_slice(&state.rng.get_seed());
    b.u64(state.rng.get_stream());
    b.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    put(b"RNGS", b);

    let mut b = Out::default();
    b.len32(state.history.len());
    for h in &state.history {
        b.u32(h.task.0);
        b.len32(h.accuracies.len());
        for (t, a) in &h.accuracies {
            b.u32(t.0);
            b.f64(*a);
        }
    }
    put(b"HIST", b);

    let mut b = Out::default();
    b.u64(state.centroids as u64);
    put(b"MISC", b);

    file.0
}

/// Parses checkpoint bytes; any inconsistency is an error naming its section.
pub fn decode(bytes: &[u8]) -> Result<DecomposedState> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(err("header", "missing APDC magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(err("header", format!("version {version}, expected {VERSION}")));
    }
    let mut bodies: Vec<&[u8]> = Vec::with_capacity(SECTIONS.len());
    let mut pos = 8;
    for tag in SECTIONS {
        let name = section_name(tag);
        if bytes.len() < pos + 12 {
            return Err(err(name, "truncated section header"));
        }
        if &bytes[pos..pos + 4] != tag {
            return Err(err(name, "missing or out of order"));
        }
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().expect("8 bytes"));
        pos += 12;
        if ((bytes.len() - pos) as u64) < len {
            return Err(err(name, "truncated"));
        }
        let len = len as usize;
        bodies.push(&bytes[pos..pos + len]);
        pos += len;
    }
    if pos != bytes.len() {
        return Err(err("trailer", "bytes after the last section"));
    }
    let reader = |i: usize| In {
        buf: bodies[i],
        pos: 0,
        section: section_name(SECTIONS[i]),
    };

    let mut r = reader(0);
    let input_dim = r.u32()? as usize;
    let n_hidden = r.count("layer", 1 << 16)?;
    let hidden = (0..n_hidden)
        .map(|_| r.u32().map(|h| h as usize))
        .collect::<Result<Vec<_>>>()?;
    let activation =
        Activation::from_code(r.u8()?).ok_or_else(|| err("ARCH", "unknown activation"))?;
    let adaptive_mask = match r.u8()? {
        0 => false,
        1 => true,
        _ => return Err(err("ARCH", "bad mask flag")),
    };
    r.done()?;
    if input_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
        return Err(err("ARCH", "zero-sized layer"));
    }
    let arch = Architecture {
        input_dim,
        hidden,
        activation,
        adaptive_mask,
    };
    let dims = arch.layer_dims();

    let mut r = reader(1);
    let mut layers = Vec::with_capacity(dims.len());
    for &(i, o) in &dims {
        layers.push(DecomposedLayer {
            shared: r.dense(i, o)?,
            adaptive: BTreeMap::new(),
            mask_logits: BTreeMap::new(),
        });
    }
    r.done()?;

    let mut r = reader(2);
    let shared_snapshot = dims
        .iter()
        .map(|&(i, o)| r.dense(i, o))
        .collect::<Result<Vec<_>>>()?;
    r.done()?;

    let mut r = reader(3);
    let n_tasks = r.count("task", 1 << 24)?;
    let mut tasks = Vec::with_capacity(n_tasks);
    for _ in 0..n_tasks {
        let t = r.task()?;
        if tasks.last().is_some_and(|&p| t <= p) {
            return Err(err("TAUS", "task ids not strictly increasing"));
        }
        tasks.push(t);
        for (l, &(i, o)) in dims.iter().enumerate() {
            let tau = r.sparse(i, o)?;
            layers[l].adaptive.insert(t, tau);
        }
    }
    r.done()?;

    let mut r = reader(4);
    if r.count("task", 1 << 24)? != n_tasks {
        return Err(err("MASK", "task count differs from TAUS"));
    }
    for &t in &tasks {
        if r.task()? != t {
            return Err(err("MASK", "task ids differ from TAUS"));
        }
        for (l, &(_, o)) in dims.iter().enumerate() {
            let v = (0..o).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            layers[l].mask_logits.insert(t, v);
        }
    }
    r.done()?;

    let mut r = reader(5);
    let n_groups = r.count("group", 1 << 24)?;
    let mut groups = BTreeMap::new();
    for _ in 0..n_groups {
        let g = GroupId(r.u32()?);
        let ls = dims
            .iter()
            .map(|&(i, o)| r.sparse(i, o))
            .collect::<Result<Vec<_>>>()?;
        if groups.insert(g, LocalShared { layers: ls }).is_some() {
            return Err(err("GRPS", format!("duplicate group {g}")));
        }
    }
    r.done()?;

    let mut r = reader(6);
    let mut assignment = BTreeMap::new();
    for _ in 0..r.count("assignment", 1 << 24)? {
        let t = r.task()?;
        let g = GroupId(r.u32()?);
        if !layers[0].adaptive.contains_key(&t) {
            return Err(err("ASGN", format!("unknown task {t}")));
        }
        if !groups.contains_key(&g) {
            return Err(err("ASGN", format!("unknown group {g}")));
        }
        assignment.insert(t, g);
    }
    r.done()?;

    let mut r = reader(7);
    if r.count("task", 1 << 24)? != n_tasks {
        return Err(err("HEAD", "task count differs from TAUS"));
    }
    let feature = arch.feature_dim();
    let mut heads = BTreeMap::new();
    for &t in &tasks {
        if r.task()? != t {
            return Err(err("HEAD", "task ids differ from TAUS"));
        }
        let classes = r.count("class", 1 << 20)?;
        if classes == 0 {
            return Err(err("HEAD", "head without classes"));
        }
        heads.insert(t, r.dense(feature, classes)?);
    }
    r.done()?;

    let mut r = reader(8);
    let mut restored = BTreeMap::new();
    for _ in 0..r.count("task", 1 << 24)? {
        let t = r.task()?;
        let ls = dims
            .iter()
            .map(|&(i, o)| r.dense(i, o))
            .collect::<Result<Vec<_>>>()?;
        restored.insert(t, ls);
    }
    r.done()?;

    let mut r = reader(9);
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    r.done()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut r = reader(10);
    let mut history = Vec::new();
    for _ in 0..r.count("history", 1 << 24)? {
        let task = r.task()?;
        let mut accuracies = Vec::new();
        for _ in 0..r.count("accuracy", 1 << 24)? {
            let t = r.task()?;
            let a = r.f64()?;
            if !(0.0..=1.0).contains(&a) {
                return Err(err("HIST", format!("accuracy {a} outside [0, 1]")));
            }
            accuracies.push((t, a));
        }
        history.push(HistoryEntry { task, accuracies });
    }
    r.done()?;

    let mut r = reader(11);
    let centroids = r.u64()? as usize;
    r.done()?;

    let state = DecomposedState {
        arch,
        layers,
        groups,
        assignment,
        heads,
        shared_snapshot,
        restored,
        centroids,
        rng,
        history,
    };
    Ok(state)
}

/// Writes atomically: a sibling temporary file is renamed into place.
pub fn save(state: &DecomposedState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(state))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DecomposedState> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::TauInit;

    fn state() -> DecomposedState {
        let mut s = DecomposedState::new(Architecture::new(3, vec![4, 2]), 5);
        for t in [0, 2, 5] {
            s.init_task(TaskId(t), TauInit::CopyShared, 3).unwrap();
        }
        for l in s.layers.iter_mut() {
            let tau = l.adaptive.get_mut(&TaskId(2)).unwrap();
            for (k, v) in tau.values_mut().enumerate() {
                if k % 3 == 0 {
                    *v = 0.0;
                }
            }
            l.mask_logits.get_mut(&TaskId(5)).unwrap()[0] = -1.25;
        }
        let ls = s.layers.iter().map(|l| {
            let mut d = Dense::zeros(l.shared.input_dim(), l.shared.output_dim());
            d.weight.set(0, 1, 0.5);
            d
        });
        s.groups.insert(GroupId(3), LocalShared { layers: ls.collect() });
        s.assignment.insert(TaskId(0), GroupId(3));
        s.prepare_restore_targets(Some(TaskId(5))).unwrap();
        s.history.push(HistoryEntry {
            task: TaskId(0),
            accuracies: vec![(TaskId(0), 0.75)],
        });
        s.centroids = 4;
        let _ = rand::Rng::random::<u64>(&mut s.rng);
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = state();
        let bytes = encode(&s);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = encode(&state());
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn errors_name_the_section() {
        let mut bytes = encode(&state());
        bytes[4] = 9;
        assert!(decode(&bytes).unwrap_err().to_string().contains("header"));
        let mut bytes = encode(&state());
        let at = bytes.windows(4).position(|w| w == b"HEAD").unwrap();
        bytes[at] = b'X';
        assert!(decode(&bytes).unwrap_err().to_string().contains("HEAD"));
        let mut bytes = encode(&state());
        bytes.push(0);
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn decreasing_sparse_indices_are_rejected() {
        let mut o = Out::default();
        o.u32(2);
        o.u32(3);
        o.f64(1.0);
        o.u32(1);
        o.f64(2.0);
        let mut r = In {
            buf: &o.0,
            pos: 0,
            section: "TAUS",
        };
        let e = r.sparse(2, 2).unwrap_err().to_string();
        assert!(e.contains("TAUS") && e.contains("increasing"), "{e}");
    }
}

//! Binary dataset cache, one file per split.
//!
//! All integers little-endian:
//!
//! ```text
//! magic      "THCTDS1"
//! role       u32   (0 train, 1 val, 2 test)
//! classes    u32, then per class: u32 byte length + UTF-8 name
//! first_id   u64   (sample ids are consecutive from here)
//! count      u32
//! records    count × (label u32, T u32, V u32, M u32, 3·T·V·M × f32)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::data::skeleton::{DatasetSplit, SequenceMeta, SkeletonSequence, SplitRole, COORDS};
use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 7] = b"THCTDS1";

pub fn write_split<W: Write>(split: &DatasetSplit, out: W) -> Result<()> {
    let first_id = split.samples[0].meta.sample_id;
    for (i, s) in split.samples.iter().enumerate() {
        if s.meta.sample_id != first_id + i as u64 {
            return Err(Error::invalid("cached splits need consecutive sample ids"));
        }
    }
    let mut w = Writer::new(out);
    w.bytes(DATASET_MAGIC)?;
    w.u32(split.role.as_u32())?;
    w.u32(split.class_names.len() as u32)?;
    for name in &split.class_names {
        w.string(name)?;
    }
    w.u64(first_id)?;
    w.u32(split.samples.len() as u32)?;
    for s in &split.samples {
        w.u32(s.label as u32)?;
        for &d in &s.coords().shape()[1..] {
            w.u32(d as u32)?;
        }
        w.f32s(s.coords().data())?;
    }
    w.finish()
}

pub fn read_split<R: Read>(input: R) -> Result<DatasetSplit> {
    let mut r = Reader::new(input);
    r.magic(DATASET_MAGIC)?;
    let role_code = r.u32()?;
    let role = SplitRole::from_u32(role_code)
        .ok_or_else(|| Error::invalid(format!("unknown split role {role_code}")))?;
    let classes = r.u32()? as usize;
    let names = (0..classes).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let first_id = r.u64()?;
    let count = r.u32()? as usize;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let label = r.u32()? as usize;
        let (t, v, m) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let data = r.f32s(COORDS * t * v * m)?;
        let coords = Tensor::new([COORDS, t, v, m], data)?;
        let meta = SequenceMeta {
            sample_id: first_id + i as u64,
            source: format!("cache:{}", role.as_str()),
            original_frames: t,
        };
        samples.push(SkeletonSequence::new(coords, label, meta)?);
    }
    r.expect_end()?;
    DatasetSplit::new(samples, names, role)
}

pub fn save_split(split: &DatasetSplit, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_split(split, std::io::BufWriter::new(file))
}

pub fn load_split(path: &Path) -> Result<DatasetSplit> {
    let file = std::fs::File::open(path)?;
    read_split(std::io::BufReader::new(file))
}

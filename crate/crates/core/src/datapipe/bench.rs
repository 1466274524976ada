use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use super::{read_manifest, BenchRecord, Category};
use crate::error::{PainterError, Result};
use crate::raster::{load_rgb, BinaryMask};

#[derive(Debug, Clone, PartialEq)]
pub struct Bench {
    pub records: Vec<BenchRecord>,
    pub category_counts: BTreeMap<Category, usize>,
}

/// Load and validate every record of a benchmark (or shard) directory.
pub fn load_bench(dir: &Path) -> Result<Bench> {
    let entries = read_manifest(dir)?;
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(entries.len());
    let mut category_counts = BTreeMap::new();
    for e in entries {
        if !seen.insert(e.id.clone()) {
            return Err(PainterError::schema(Some(&e.id), "duplicate record id"));
        }
        let wrap = |err: PainterError| PainterError::schema(Some(&e.id), err.to_string());
        let image = load_rgb(&dir.join(&e.image)).map_err(wrap)?;
        let seg_mask = BinaryMask::load_png(&dir.join(&e.seg_mask)).map_err(wrap)?;
        let eval_mask = match &e.eval_mask {
            Some(p) => BinaryMask::load_png(&dir.join(p)).map_err(wrap)?,
            None => seg_mask.clone(),
        };
        let record = BenchRecord {
            id: e.id,
            image,
            seg_mask,
            eval_mask,
            local_prompt: e.prompt,
            kind: e.kind,
            category: e.category,
        };
        record.validate()?;
        *category_counts.entry(record.category).or_default() += 1;
        records.push(record);
    }
    Ok(Bench {
        records,
        category_counts,
    })
}

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    make_local_prompt, read_manifest, write_manifest, BenchRecord, ManifestEntry, PromptClients, PromptConfig,
    PromptOutcome, SourceRecord,
};
use crate::error::{PainterError, Result};
use crate::maskgen::{sample_mask, MaskGenParams, MaskKind};
use crate::par::Execution;
use crate::raster::{load_rgb, save_rgb, BinaryMask};

#[derive(Debug, Clone, Copy, Default)]
pub struct ShardConfig {
    pub seed: u64,
    pub prompt: PromptConfig,
    pub execution: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ShardStats {
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub failed: usize,
    /// Mask kinds among accepted records.
    pub kinds: BTreeMap<MaskKind, usize>,
    pub rejection_rate: f64,
    pub failures: Vec<RecordFailure>,
}

impl ShardStats {
    pub fn kind_fraction(&self, kind: MaskKind) -> f64 {
        if self.accepted == 0 {
            0.0
        } else {
            *self.kinds.get(&kind).unwrap_or(&0) as f64 / self.accepted as f64
        }
    }
}

/// Per-record generator: a pure function of the shard seed and record id,
/// so results do not depend on scheduling.
pub fn record_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

enum Processed {
    Accepted(BenchRecord),
    Rejected,
}

fn process(src: &SourceRecord, params: &MaskGenParams, clients: &PromptClients<'_>, cfg: &ShardConfig) -> Result<Processed> {
    let mut rng = record_rng(cfg.seed, &src.id);
    let k: f64 = rng.random();
    let (mask, kind) = sample_mask(&src.seg_mask, k, params, &mut rng)?;
    match make_local_prompt(&src.image, &src.seg_mask, clients, cfg.prompt)? {
        PromptOutcome::Accepted { prompt, .. } => Ok(Processed::Accepted(BenchRecord {
            id: src.id.clone(),
            image: src.image.clone(),
            seg_mask: src.seg_mask.clone(),
            eval_mask: mask,
            local_prompt: prompt,
            kind: Some(kind),
            category: src.category,
        })),
        PromptOutcome::Rejected { prompt, score } => {
            log::info!("record {}: dropped prompt {prompt:?} with score {score:.4}", src.id);
            Ok(Processed::Rejected)
        }
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| PainterError::io(path, e))
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
        return Err(PainterError::schema(Some(id), "record id must be a plain file stem"));
    }
    Ok(())
}

/// Write records (id-sorted) with their assets and manifest into `dir`.
pub fn write_records(dir: &Path, records: &[BenchRecord]) -> Result<()> {
    ensure_dir(&dir.join("images"))?;
    ensure_dir(&dir.join("masks"))?;
    let mut sorted: Vec<&BenchRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut entries = Vec::with_capacity(sorted.len());
    for r in sorted {
        check_id(&r.id)?;
        let image = format!("images/{}.png", r.id);
        let seg = format!("masks/{}_seg.png", r.id);
        let eval = format!("masks/{}_eval.png", r.id);
        save_rgb(&r.image, &dir.join(&image))?;
        r.seg_mask.save_png(&dir.join(&seg))?;
        r.eval_mask.save_png(&dir.join(&eval))?;
        entries.push(ManifestEntry {
            id: r.id.clone(),
            image,
            seg_mask: seg,
            eval_mask: Some(eval),
            prompt: r.local_prompt.clone(),
            kind: r.kind,
            category: r.category,
        });
    }
    write_manifest(dir, &entries)
}

/// Build a training shard: per record draw `k`, attach the sampled mask and a
/// filtered local prompt, then write everything to `out`. Bad records are
/// reported in the stats and never abort the shard.
pub fn build_shard(
    sources: &[SourceRecord],
    params: &MaskGenParams,
    clients: &PromptClients<'_>,
    cfg: &ShardConfig,
    out: &Path,
) -> Result<ShardStats> {
    params.validate()?;
    let results = cfg.execution.map(sources, |_, src| (src.id.clone(), process(src, params, clients, cfg)));

    let mut stats = ShardStats {
        total: sources.len(),
        ..Default::default()
    };
    let mut accepted = Vec::new();
    for (id, res) in results {
        match res {
            Ok(Processed::Accepted(r)) => {
                *stats.kinds.entry(r.kind.expect("shard records carry a kind")).or_default() += 1;
                accepted.push(r);
            }
            Ok(Processed::Rejected) => stats.rejected += 1,
            Err(e) => {
                let e = e.with_record(&id);
                log::warn!("record {id} failed: {e}");
                stats.failures.push(RecordFailure { id, error: e.to_string() });
            }
        }
    }
    stats.accepted = accepted.len();
    stats.failed = stats.failures.len();
    stats.failures.sort_by(|a, b| a.id.cmp(&b.id));
    stats.rejection_rate = if stats.total == 0 {
        0.0
    } else {
        stats.rejected as f64 / stats.total as f64
    };

    ensure_dir(out)?;
    write_records(out, &accepted)?;
    let stats_path = out.join("stats.json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats)?).map_err(|e| PainterError::io(&stats_path, e))?;
    Ok(stats)
}

/// Read a source directory (manifest with `id`, `image`, `seg_mask`, optional `category`).
pub fn load_sources(dir: &Path) -> Result<Vec<SourceRecord>> {
    let mut out = Vec::new();
    for e in read_manifest(dir)? {
        let image = load_rgb(&dir.join(&e.image)).map_err(|err| PainterError::schema(Some(&e.id), err.to_string()))?;
        let seg_mask =
            BinaryMask::load_png(&dir.join(&e.seg_mask)).map_err(|err| PainterError::schema(Some(&e.id), err.to_string()))?;
        if seg_mask.dims() != (image.height() as usize, image.width() as usize) {
            return Err(PainterError::schema(Some(&e.id), "segmentation mask and image dims differ"));
        }
        out.push(SourceRecord {
            id: e.id,
            image,
            seg_mask,
            category: e.category,
        });
    }
    Ok(out)
}

pub fn write_sources(dir: &Path, records: &[SourceRecord]) -> Result<()> {
    ensure_dir(&dir.join("images"))?;
    ensure_dir(&dir.join("masks"))?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        check_id(&r.id)?;
        let image = format!("images/{}.png", r.id);
        let seg = format!("masks/{}_seg.png", r.id);
        save_rgb(&r.image, &dir.join(&image))?;
        r.seg_mask.save_png(&dir.join(&seg))?;
        entries.push(ManifestEntry {
            id: r.id.clone(),
            image,
            seg_mask: seg,
            eval_mask: None,
            prompt: String::new(),
            kind: None,
            category: r.category,
        });
    }
    write_manifest(dir, &entries)
}

//! Synthesizes a small band-structured dataset and writes it as AVFB files
//! plus a JSONL manifest.

use avrobust::audiofeat::{synthesize_dataset, DatasetSpec, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = DatasetSpec::default_with(4, 24, 7)?;
    spec.clip_seconds = 2.0;
    let ds = synthesize_dataset(&spec)?;
    for (i, c) in spec.bank.classes.iter().enumerate() {
        println!("class {i} {:<16} bins {:?}", c.name, c.band);
    }
    let dir = tempfile::tempdir()?;
    let manifest = ds.write(dir.path())?;
    println!(
        "{} clips ({} train / {} eval), manifest hash {}",
        manifest.records.len(),
        ds.split(Split::Train).len(),
        ds.split(Split::Eval).len(),
        &manifest.hash()?[..16]
    );
    let first = &ds.clips[0];
    println!("{}: labels {:?}, features {:?}", first.id, first.labels.active().collect::<Vec<_>>(), first.features.tensor().shape());
    Ok(())
}

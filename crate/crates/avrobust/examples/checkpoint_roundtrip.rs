//! Saves a model checkpoint and a feature tensor, reads both back and
//! shows that a corrupted header is rejected with its byte offset.

use avrobust::audiofeat::container::{read_tensor_file, write_tensor_file};
use avrobust::audiofeat::DType;
use avrobust::diffengine::Tensor;
use avrobust::models::{file_hash, load_checkpoint, save_checkpoint, Checkpoint, CsnConfig, Model, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let model = Model::new(&ModelConfig::Csn(CsnConfig::default()), 3)?;
    let path = dir.path().join("model.avck");
    save_checkpoint(&path, &Checkpoint::new(model.clone()))?;
    let back = load_checkpoint(&path)?;
    println!("checkpoint {} bytes, sha256 {}", std::fs::metadata(&path)?.len(), file_hash(&path)?);
    println!("parameters identical after reload: {}", back.model.params().tensors() == model.params().tensors());

    let t = Tensor::new(&[2, 3], vec![0.25, -1.0, 3.0, 4.5, 0.0, -2.0])?;
    let feat = dir.path().join("x.avfb");
    write_tensor_file(&feat, &t, DType::F64)?;
    println!("AVFB round-trip exact: {}", read_tensor_file(&feat)? == t);

    let mut bytes = std::fs::read(&feat)?;
    bytes[4] = 99;
    std::fs::write(&feat, bytes)?;
    println!("corrupted version byte: {}", read_tensor_file(&feat).unwrap_err());
    Ok(())
}

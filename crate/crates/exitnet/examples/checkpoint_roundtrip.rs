//! Bit-exact persistence: model checkpoints (magic, version, topology,
//! little-endian parameters) and IDX-format datasets.
//!
//! Run with: cargo run --release --example checkpoint_roundtrip

use exitnet::data::{gen_blobs, idx, BlobParams};
use exitnet::model::{load_checkpoint, save_checkpoint, BackboneSpec, ModelGraph};
use exitnet::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> exitnet::Result<()> {
    let dir = std::env::temp_dir().join("exitnet-roundtrip");
    std::fs::create_dir_all(&dir)?;

    let spec = BackboneSpec {
        input_shape: [1, 16, 16],
        widths: vec![8, 16, 16],
        pool_after: vec![1],
        ..BackboneSpec::default()
    };
    let model = ModelGraph::build(&spec, 2, 3)?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    let loaded = load_checkpoint(&ckpt)?;
    println!(
        "checkpoint {} ({} bytes)",
        ckpt.display(),
        std::fs::metadata(&ckpt)?.len()
    );
    println!("parameters bit-identical after load: {}", model == loaded);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut identical = true;
    for _ in 0..10 {
        let input = Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
        identical &= model.forward_all_exits(&input)? == loaded.forward_all_exits(&input)?;
    }
    println!("forward outputs identical on 10 random inputs: {identical}");

    // Corruption is rejected outright, no partial model.
    let mut bytes = std::fs::read(&ckpt)?;
    bytes[0] ^= 0xff;
    let bad = dir.join("corrupt.ckpt");
    std::fs::write(&bad, &bytes)?;
    println!("corrupted magic -> {}", load_checkpoint(&bad).unwrap_err());

    // IDX dataset roundtrip; the format matches the classic handwritten-digit
    // archives, so those load directly too.
    let ds = gen_blobs(10, 64, &BlobParams::default(), 9)?;
    let (images, labels) = idx::save_dataset(&ds, &dir, "sample")?;
    let back = idx::load_dataset(dir.join(&images), dir.join(&labels), 10)?;
    println!(
        "\nIDX roundtrip: {} samples, labels preserved: {}",
        back.len(),
        back.labels == ds.labels
    );
    Ok(())
}

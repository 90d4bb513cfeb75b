//! Per-block FLOP and parameter accounting for the reference backbone, and
//! the FLOP-equidistant exit placements it produces for several exit counts.
//!
//! Run with: cargo run --release --example flops_accounting

use exitnet::model::{place_exits, BackboneSpec, ModelGraph};

fn main() -> exitnet::Result<()> {
    let spec = BackboneSpec::default();
    let model = ModelGraph::build(&spec, 1, 0)?;

    let block_flops = model.block_flops()?;
    let shapes = model.block_output_shapes()?;
    let total: u64 = block_flops.iter().sum();

    println!("reference backbone on {:?} input:", spec.input_shape);
    println!(
        "{:>5} {:>14} {:>12} {:>10}",
        "block", "output", "flops", "cum %"
    );
    let mut cum = 0u64;
    for (i, (flops, shape)) in block_flops.iter().zip(&shapes).enumerate() {
        cum += flops;
        println!(
            "{:>5} {:>14} {:>12} {:>9.1}%",
            i + 1,
            format!("{}x{}x{}", shape[0], shape[1], shape[2]),
            flops,
            100.0 * cum as f64 / total as f64
        );
    }
    println!("backbone params: {}", model.backbone_params());

    for m in [1, 3, 6] {
        let placements = place_exits(&block_flops, m)?;
        let model = ModelGraph::build(&spec, m, 0)?;
        println!(
            "\nM = {m}: exits after blocks {:?} (1-based)",
            placements.iter().map(|p| p + 1).collect::<Vec<_>>()
        );
        for ordinal in 1..=model.num_outputs() {
            println!(
                "  exit {ordinal}: {:>12} flops, {:>8} params on its direct path",
                model.flops_to_exit(ordinal)?,
                model.params_to_exit(ordinal)?
            );
        }
    }
    Ok(())
}

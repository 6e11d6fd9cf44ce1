//! Looks inside one cross-attention head: the spatial map, the channel
//! gates and the pooled output, and how a block sums its heads.

use eri_core::attention::{AttentionBlock, CrossAttentionHead};
use eri_core::autodiff::{Graph, Tensor};
use eri_core::nn::init_rng;
use eri_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let (c, h, w) = (8, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fmap = Tensor::from_vec([1, c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let mut init = init_rng(0);
    let head = CrossAttentionHead::new("head", c, 2, &mut init)?;
    let mut g = Graph::no_grad();
    let x = g.constant(&fmap);
    let parts = head.forward_parts(&mut g, x)?;

    println!("spatial map (sigmoid, {h}x{w}):");
    for row in g.value(parts.spatial_map).chunks(w) {
        println!("  {}", row.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "));
    }
    let gates: Vec<String> = g.value(parts.channel_gates).iter().map(|v| format!("{v:.3}")).collect();
    println!("channel gates: {}", gates.join(" "));
    let out: Vec<String> = g.value(parts.output).iter().map(|v| format!("{v:+.4}")).collect();
    println!("head output:   {}", out.join(" "));

    let block = AttentionBlock::new("block", c, 4, 2, &mut init)?;
    let y = block.forward(&mut g, x)?;
    println!("block of {} heads -> {:?}", block.heads.len(), g.shape(y));
    Ok(())
}

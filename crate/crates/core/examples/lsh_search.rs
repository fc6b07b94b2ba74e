// The p-stable collision law and the recall of the index against exact
// search on Gaussian points.

use latent_match::domain::UnitId;
use latent_match::latent::{LatentTable, RowMeta};
use latent_match::lsh::{brute_force_knn, build_index, collision_probability, collision_rate, default_width, query_knn, recall, LshParams, NeighborMode, QueryConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> latent_match::Result<()> {
    println!("d/r   closed form  simulated");
    for d in [0.0, 0.5, 1.0, 2.0, 4.0] {
        println!("{d:<5} {:>11.4} {:>10.4}", collision_probability(1.0, d), collision_rate(1.0, d, 200_000, 1));
    }

    let (n, dim) = (10_000, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut draw = |n: usize| {
        let values: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let meta = (0..n).map(|i| RowMeta { unit: UnitId(i as u32), time: 0, action: i % 2, outcome: 0.0 }).collect();
        LatentTable::from_rows(dim, values, meta)
    };
    let rows = draw(n)?;
    let queries = draw(100)?;
    let width = default_width(&rows, 5)?;
    let index = build_index(rows.clone(), LshParams { tables: 12, hashes: 8, width, seed: 9 })?;
    println!("width {width:.2}, {} bucket entries", index.entry_count());
    for mode in [NeighborMode::Unrestricted, NeighborMode::ActionStratified] {
        let cfg = QueryConfig { mode, ..QueryConfig::new(10) };
        let (mut hit, mut examined) = (0.0, 0);
        for (z, m) in queries.iter() {
            let got = query_knn(&index, z, m.action, &cfg)?;
            examined += got.examined;
            hit += recall(&got.items, &brute_force_knn(&rows, z, m.action, 10, mode)?);
        }
        println!("{:<18} recall@10 {:.3}, {} candidates per query", mode.as_str(), hit / 100.0, examined / 100);
    }
    Ok(())
}

// Summarises a hand-built history at several window lengths and shows that
// nothing recorded after the query time is read.

use latent_match::domain::{DatasetBuilder, UnitId};
use latent_match::history::{feature_vector, serialize_history_text, HistoryBuilder, HistoryConfig};

fn main() -> latent_match::Result<()> {
    let mut b = DatasetBuilder::new(3).cumulative_actions(false);
    let u = UnitId(0);
    for (day, hr) in [(1, 72.0), (5, 75.0), (20, 80.0), (27, 84.0), (29, 90.0), (40, 60.0)] {
        b.observe(u, day, "heart_rate", hr);
    }
    b.observe(u, 28, "breathing_rate", 16.0);
    b.outcome(u, 14, 1, 3.5);
    b.outcome(u, 30, 2, 4.0);
    let data = b.build();

    let builder = HistoryBuilder::new(&data, HistoryConfig::default())?;
    let (summary, trace) = builder.build_traced(u, 30)?;
    for (c, name) in summary.concepts.iter().enumerate() {
        for (s, scale) in summary.scales.iter().enumerate() {
            let w = summary.get(c, s);
            println!("{name:<15} {scale:>3}d  n={} mean={:?} max={:?}", w.count, w.mean, w.max);
        }
    }
    println!("prior action {} prior outcome {:?}", summary.prior_action, summary.prior_outcome);
    println!("read {} observations between days {:?} and {:?}", trace.contributing, trace.min_time, trace.max_time);
    assert!(trace.max_time.is_none_or(|t| t <= 30));

    let layout = builder.layout();
    println!("feature vector of {} slots", feature_vector(&summary, &layout)?.len());
    println!("text form: {}", serialize_history_text(&summary));
    Ok(())
}

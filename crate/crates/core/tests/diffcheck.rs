// temporary scratch test
#[test]
fn find_diff() {
    use dqrng_core::*;
    use dqrng_core::protocol::transcript::RoundTranscript;
    let params = SessionParams {
        n: 4, l: 4, b_lo: 0, b_hi: 255, m: 10_000, weights: None,
        agg_fn: AggFn::SumMod, car_threshold: 50.0, gof_alpha: 1e-6,
        n_pulses: 20_000, bins_per_period: 400, pump_shape: PumpShape::Uniform,
        max_offset: 10, window_bins: 2,
    };
    let mut session = Session::new(params.clone()).unwrap();
    let mut rng = dqrng_core::seed::rng(5, "classical", 0);
    use rand::Rng;
    for id in 0..4 {
        let values: Vec<u64> = (0..params.m).map(|_| rng.random_range(0..params.n_pulses)).collect();
        session.submit_classical(ClassicalReveal { participant: id, values, weight: None }).unwrap();
    }
    let records = generate_round(&SourceConfig::defaults(4, params.n_pulses, 5)).unwrap();
    for (id, node_records) in records.iter().enumerate() {
        session.submit_quantum(id, node_records).unwrap();
    }
    session.run_verification().unwrap();
    session.consensus2().unwrap();
    session.compute_output().unwrap();
    let mut t = session.into_transcript().unwrap();
    t.i_final.push(1 << 60);
    t.params.n_pulses = (1 << 60) + 1;
    let a = t.canonical_json();
    let back: RoundTranscript = serde_json::from_slice(&a).unwrap();
    let b = back.canonical_json();
    if a != b {
        let pos = a.iter().zip(&b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
        let lo = pos.saturating_sub(80);
        println!("orig: ...{}", String::from_utf8_lossy(&a[lo..(pos+80).min(a.len())]));
        println!("back: ...{}", String::from_utf8_lossy(&b[lo..(pos+80).min(b.len())]));
        panic!("diff at byte {pos}; lens {} vs {}", a.len(), b.len());
    }
}

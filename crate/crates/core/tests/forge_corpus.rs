use emomod_core::forge::gen_speech_track;

#[test]
fn speech_tracks_are_smooth_over_many_seeds() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        for frames in [32, 64, 128] {
            let t = gen_speech_track(seed, frames, 16).unwrap();
            for f in 1..frames {
                for (a, b) in t.row(f).iter().zip(t.row(f - 1)) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    println!("worst frame delta {worst}");
    assert!(worst < 0.5, "worst frame delta {worst}");
}

//! Deterministic fixtures shared by the benchmarks.

use sedkit::audiofeat::AudioClip;
use sedkit::corpus::{Event, EventList};
use sedkit::crnn::PosteriorMap;
use sedkit::tensor::Array;

/// Cheap pseudo-random values in [-1, 1) from an integer hash.
pub fn noise(i: usize, salt: u64) -> f64 {
    let mut z = (i as u64).wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

pub fn array(shape: &[usize], salt: u64) -> Array {
    Array::from_fn(shape.to_vec(), |i| noise(i, salt))
}

/// Ten seconds of 16 kHz noise.
pub fn clip_16k() -> AudioClip {
    AudioClip::new((0..160_000).map(|i| 0.3 * noise(i, 1)).collect(), 16_000, "bench").unwrap()
}

/// Reference events and matching posteriors for `clips` clips of 157 frames.
pub fn scored_corpus(clips: usize, n_classes: usize) -> (Vec<EventList>, Vec<PosteriorMap>) {
    let frame = 10.0 / 157.0;
    let mut refs = Vec::new();
    let mut posts = Vec::new();
    for c in 0..clips {
        let mut events = Vec::new();
        let mut values = Array::zeros([157, n_classes]);
        for k in 0..3 {
            let class = (c + k) % n_classes;
            let start = 10 + 45 * k + (c % 7);
            let len = 15 + (c + k) % 20;
            events.push(Event::new(class, start as f64 * frame, (start + len) as f64 * frame).unwrap());
            for t in start.saturating_sub(3)..(start + len + 3).min(157) {
                values.set2(t, class, 0.5 + 0.45 * noise(t * 31 + class, c as u64));
            }
        }
        refs.push(events);
        posts.push(PosteriorMap::new(values).unwrap());
    }
    (refs, posts)
}

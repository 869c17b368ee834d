use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use wavjepa::ingest::{load_clip, resample, write_clip_pcm16, SoundClip};

fn sine(freq: f64, rate: u32, seconds: f64) -> SoundClip {
    let n = (rate as f64 * seconds) as usize;
    SoundClip::mono((0..n).map(|t| 0.8 * (2.0 * std::f64::consts::PI * freq * t as f64 / rate as f64).sin()).collect(), rate).unwrap()
}

/// Magnitude spectrum of `x` over bins `0..=n/2`, Hann windowed.
fn spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
            Complex::new(v * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..=n / 2].iter().map(|c| c.norm()).collect()
}

fn peak_hz(clip: &SoundClip) -> (f64, f64) {
    let mag = spectrum(clip.channel(0));
    let (bin, _) = mag.iter().enumerate().fold((0, 0.0), |best, (i, &m)| if m > best.1 { (i, m) } else { best });
    let bin_hz = clip.sample_rate() as f64 / clip.len() as f64;
    (bin as f64 * bin_hz, bin_hz)
}

#[test]
fn sine_keeps_its_frequency_after_downsampling() {
    for (rate, freq) in [(48_000, 440.0), (44_100, 440.0), (22_050, 1_000.0), (8_000, 440.0)] {
        let out = resample(&sine(freq, rate, 1.0), 16_000).unwrap();
        assert_eq!(out.sample_rate(), 16_000);
        let (hz, bin) = peak_hz(&out);
        assert!((hz - freq).abs() <= bin, "{rate} Hz input: peak at {hz} Hz, want {freq}");
    }
}

#[test]
fn content_above_new_nyquist_is_suppressed() {
    // 9 kHz folds to 7 kHz at 16 kHz unless the anti-alias filter removes it.
    let x = sine(9_000.0, 48_000, 1.0);
    let y = resample(&x, 16_000).unwrap();
    let in_rms = (x.channel(0).iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    let out_rms = (y.channel(0).iter().map(|v| v * v).sum::<f64>() / y.len() as f64).sqrt();
    assert!(out_rms < 0.01 * in_rms, "alias energy ratio {}", out_rms / in_rms);
}

#[test]
fn pcm16_file_resamples_like_memory() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("tone.wav");
    let clip = sine(440.0, 48_000, 0.5);
    write_clip_pcm16(&p, &clip).unwrap();
    let loaded = load_clip(&p).unwrap();
    assert_eq!(loaded.sample_rate(), 48_000);
    let (hz, bin) = peak_hz(&resample(&loaded, 16_000).unwrap());
    assert!((hz - 440.0).abs() <= bin);
}

use super::AgentTrack;

/// Per-frame `[position, velocity, acceleration]` rows.
///
/// Velocity at frame `i ≥ 1` is `(p[i] − p[i−1]) / dt` with `dt` the time
/// between states; acceleration at `i ≥ 2` is `v[i] − v[i−1]`. Leading
/// entries repeat the first defined value. Returns `None` (with a warning)
/// for tracks shorter than three states.
pub fn derive_motion_features(track: &AgentTrack) -> Option<Vec<Vec<f64>>> {
    let n = track.len();
    if n < 3 {
        log::warn!(
            "skipping track of agent {} in scene {}: {} states, motion features need 3",
            track.agent,
            track.scene,
            n
        );
        return None;
    }
    let dt = track.dt();
    let p = &track.states;
    let d = p[0].len();
    let diff = |a: &[f64], b: &[f64], scale: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (x - y) / scale).collect() };
    let mut vel: Vec<Vec<f64>> = (1..n).map(|i| diff(&p[i], &p[i - 1], dt)).collect();
    vel.insert(0, vel[0].clone());
    let mut acc: Vec<Vec<f64>> = (2..n).map(|i| diff(&vel[i], &vel[i - 1], 1.0)).collect();
    acc.insert(0, acc[0].clone());
    acc.insert(0, acc[0].clone());
    Some(
        (0..n)
            .map(|i| {
                let mut row = Vec::with_capacity(3 * d);
                row.extend_from_slice(&p[i]);
                row.extend_from_slice(&vel[i]);
                row.extend_from_slice(&acc[i]);
                row
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(xs: &[f64]) -> AgentTrack {
        AgentTrack {
            scene: "s".into(),
            agent: 1,
            start_frame: 0,
            stride: 1,
            fps: 1.0,
            states: xs.iter().map(|&x| vec![x, -x]).collect(),
            aux: Vec::new(),
        }
    }

    fn column(f: &[Vec<f64>], c: usize) -> Vec<f64> {
        f.iter().map(|r| r[c]).collect()
    }

    #[test]
    fn constant_position() {
        let f = derive_motion_features(&track(&[2.0; 5])).unwrap();
        assert!(f.iter().all(|r| r[2..].iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_motion() {
        let f = derive_motion_features(&track(&[0.0, 1.0, 2.0, 3.0])).unwrap();
        assert_eq!(column(&f, 2), vec![1.0; 4]);
        assert_eq!(column(&f, 3), vec![-1.0; 4]);
        assert_eq!(column(&f, 4), vec![0.0; 4]);
    }

    #[test]
    fn quadratic_motion() {
        let f = derive_motion_features(&track(&[0.0, 1.0, 4.0, 9.0])).unwrap();
        // v = 1, 1, 3, 5 (first padded); a = 2 from index 2 on, padded back
        assert_eq!(column(&f, 2), vec![1.0, 1.0, 3.0, 5.0]);
        assert_eq!(column(&f, 4), vec![2.0; 4]);
    }

    #[test]
    fn velocity_uses_seconds_between_states() {
        let mut t = track(&[0.0, 1.0, 2.0]);
        t.fps = 2.5;
        assert!((derive_motion_features(&t).unwrap()[1][2] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn short_track_skipped() {
        assert!(derive_motion_features(&track(&[0.0, 1.0])).is_none());
    }
}

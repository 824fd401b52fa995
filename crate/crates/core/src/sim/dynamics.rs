//! Differential-drive dynamics with first-order wheel velocity tracking.

use super::{wrap_angle, RobotState, SimParams};

/// Advances the state by one control step (`decimation` physics sub-steps).
///
/// Action components are clipped to [-1, 1], scaled to wheel velocity
/// targets, and the targets clipped to the wheel speed limit. Each sub-step
/// the wheels track their target with gain `wheel_damping` and the pose
/// integrates the resulting unicycle twist.
pub fn step_dynamics(state: &RobotState, action: [f32; 2], p: &SimParams) -> RobotState {
    let target_l = (action[0].clamp(-1.0, 1.0) * p.action_scale)
        .clamp(-p.wheel_speed_limit, p.wheel_speed_limit);
    let target_r = (action[1].clamp(-1.0, 1.0) * p.action_scale)
        .clamp(-p.wheel_speed_limit, p.wheel_speed_limit);

    let mut s = *state;
    let dt = p.sim_dt;
    let gain = (p.wheel_damping * dt).min(1.0);
    for _ in 0..p.decimation {
        s.wheel_vel[0] += gain * (target_l - s.wheel_vel[0]);
        s.wheel_vel[1] += gain * (target_r - s.wheel_vel[1]);
        s.wheel_vel[0] = s.wheel_vel[0].clamp(-p.wheel_speed_limit, p.wheel_speed_limit);
        s.wheel_vel[1] = s.wheel_vel[1].clamp(-p.wheel_speed_limit, p.wheel_speed_limit);

        let v = p.wheel_radius * (s.wheel_vel[0] + s.wheel_vel[1]) * 0.5;
        let omega = p.wheel_radius * (s.wheel_vel[1] - s.wheel_vel[0]) / p.axle_length;

        let (sin_yaw, cos_yaw) = s.pose.yaw.sin_cos();
        s.pose.x += v * cos_yaw * dt;
        s.pose.y += v * sin_yaw * dt;
        s.pose.yaw = wrap_angle(s.pose.yaw + omega * dt);

        s.body_vel = [v, 0.0];
        s.yaw_rate = omega;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Pose2D;

    fn rest() -> RobotState {
        RobotState::at_rest(Pose2D::new(0.0, 0.0, 0.0))
    }

    #[test]
    fn zero_command_from_rest_is_a_fixed_point() {
        let p = SimParams::default();
        let s = step_dynamics(&rest(), [0.0, 0.0], &p);
        assert_eq!(s, rest());
    }

    #[test]
    fn full_command_targets_saturate_at_wheel_limit() {
        let p = SimParams::default();
        // Action 1.0 scales to 40 rad/s, clipped to 20; after enough steps
        // the wheels converge to the limit, not the raw target.
        let mut s = rest();
        for _ in 0..300 {
            s = step_dynamics(&s, [1.0, 1.0], &p);
        }
        assert!((s.wheel_vel[0] - 20.0).abs() < 1e-3);
        assert!((s.wheel_vel[1] - 20.0).abs() < 1e-3);
        assert!((s.body_vel[0] - 0.03 * 20.0).abs() < 1e-3);
    }

    #[test]
    fn opposite_wheels_rotate_in_place() {
        let p = SimParams::default();
        let mut s = rest();
        for _ in 0..8 {
            s = step_dynamics(&s, [1.0, -1.0], &p);
        }
        // Wheel speeds stay equal and opposite, so v = 0 and the pose never
        // translates; yaw follows the integrated kinematic rate.
        assert!(s.pose.x.abs() < 1e-6);
        assert!(s.pose.y.abs() < 1e-6);

        // Oracle: closed-form first-order tracking toward -20/+20 with
        // per-sub-step gain 1/6, integrated by the same Euler scheme in f64.
        let mut wheel = 0.0f64;
        let mut yaw = 0.0f64;
        let gain = 10.0 / 60.0;
        for _ in 0..16 {
            wheel += gain * (20.0 - wheel);
            let omega = 0.03 * (wheel - (-wheel)) / 0.10;
            yaw += omega / 60.0;
        }
        assert!(
            (s.pose.yaw as f64 + yaw).abs() < 1e-4,
            "yaw {} vs oracle {}",
            s.pose.yaw,
            -yaw
        );
    }

    #[test]
    fn straight_line_distance_matches_integrated_speed() {
        let p = SimParams::default();
        let mut s = rest();
        let mut oracle_x = 0.0f64;
        let mut wheel = 0.0f64;
        for _ in 0..90 {
            s = step_dynamics(&s, [0.25, 0.25], &p);
            for _ in 0..2 {
                wheel += (10.0 / 60.0) * (10.0 - wheel);
                oracle_x += 0.03 * wheel / 60.0;
            }
        }
        assert!((s.pose.x as f64 - oracle_x).abs() < 1e-4);
        assert!(s.pose.y.abs() < 1e-6);
    }

    #[test]
    fn actions_outside_unit_range_are_clipped() {
        let p = SimParams::default();
        let a = step_dynamics(&rest(), [5.0, 5.0], &p);
        let b = step_dynamics(&rest(), [1.0, 1.0], &p);
        assert_eq!(a, b);
    }

    #[test]
    fn dynamics_are_bitwise_deterministic() {
        let p = SimParams::default();
        let s0 = RobotState::at_rest(Pose2D::new(0.3, -0.2, 0.7));
        let a = step_dynamics(&s0, [0.42, -0.17], &p);
        let b = step_dynamics(&s0, [0.42, -0.17], &p);
        assert_eq!(a, b);
    }
}

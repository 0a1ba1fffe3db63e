//! Stochastic predator-prey dynamics simulated with Gillespie's algorithm,
//! and the conversion of accepted trajectories into regression tasks.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::task::{Observation, Task, TaskMeta};
use crate::rng::rng;

/// Population multiplier applied to simulated counts.
pub const POPULATION_SCALE: f64 = 2.0 / 7.0;
/// Trajectories spanning more time than this are rejected.
pub const MAX_DURATION: f64 = 100.0;
/// Trajectories with more events than this are rejected.
pub const MAX_EVENTS: usize = 10_000;
/// Context plus target size of every task.
pub const POINTS_PER_TASK: usize = 150;

/// Reaction rates `(predator birth, predator death, prey birth, prey death)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LvRates(pub [f64; 4]);

impl Default for LvRates {
    fn default() -> Self {
        LvRates([0.01, 0.5, 1.0, 0.01])
    }
}

impl LvRates {
    /// Per-event rates in the current state.
    pub fn event_rates(&self, predators: u64, prey: u64) -> [f64; 4] {
        let (x, y) = (predators as f64, prey as f64);
        let [t1, t2, t3, t4] = self.0;
        [t1 * x * y, t2 * x, t3 * y, t4 * x * y]
    }

    pub fn total_rate(&self, predators: u64, prey: u64) -> f64 {
        self.event_rates(predators, prey).iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LvEvent {
    PredatorBirth,
    PredatorDeath,
    PreyBirth,
    PreyDeath,
}

impl LvEvent {
    const ALL: [LvEvent; 4] = [
        LvEvent::PredatorBirth,
        LvEvent::PredatorDeath,
        LvEvent::PreyBirth,
        LvEvent::PreyDeath,
    ];

    fn apply(self, predators: &mut u64, prey: &mut u64) {
        match self {
            LvEvent::PredatorBirth => *predators += 1,
            LvEvent::PredatorDeath => *predators -= 1,
            LvEvent::PreyBirth => *prey += 1,
            LvEvent::PreyDeath => *prey -= 1,
        }
    }
}

/// Draw the waiting time and the next event, or `None` when the total rate
/// is zero.
pub fn next_event<R: Rng>(rates: &LvRates, predators: u64, prey: u64, rng: &mut R) -> Option<(f64, LvEvent)> {
    let per_event = rates.event_rates(predators, prey);
    let total: f64 = per_event.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let dt = Exp::new(total).expect("positive rate").sample(rng);
    let mut u = rng.random::<f64>() * total;
    let mut chosen = LvEvent::ALL[3];
    for (event, rate) in LvEvent::ALL.into_iter().zip(per_event) {
        if rate > 0.0 && u < rate {
            chosen = event;
            break;
        }
        u -= rate;
    }
    // Guard against rounding selecting an event with zero rate.
    if per_event[chosen as usize] == 0.0 {
        chosen = LvEvent::ALL
            .into_iter()
            .zip(per_event)
            .filter(|(_, r)| *r > 0.0)
            .last()
            .map(|(e, _)| e)
            .expect("total rate is positive");
    }
    Some((dt, chosen))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxTime,
    MaxEvents,
    Absorbed,
}

/// States at time 0 and after every event.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub predators: Vec<u64>,
    pub prey: Vec<u64>,
    pub stop: StopReason,
}

impl Trajectory {
    pub fn events(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    pub fn duration(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    /// Population `(predators, prey)` in force at time `t`.
    pub fn state_at(&self, t: f64) -> (u64, u64) {
        let i = self.times.partition_point(|&s| s <= t).saturating_sub(1);
        (self.predators[i], self.prey[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LvConfig {
    pub rates: LvRates,
    pub initial_predators: u64,
    pub initial_prey: u64,
    /// Simulation horizon.
    pub max_time: f64,
    /// The simulator stops after this many events; one more than the
    /// acceptance limit so that over-long trajectories are detectable.
    pub max_events: usize,
    pub observations: LvObservations,
    /// Inclusive range of the context size; targets fill up to 150.
    pub n_context: (usize, usize),
    /// Attempts before giving up on finding an acceptable trajectory.
    pub max_attempts: usize,
}

impl Default for LvConfig {
    fn default() -> Self {
        Self {
            rates: LvRates::default(),
            initial_predators: 50,
            initial_prey: 100,
            max_time: MAX_DURATION,
            max_events: MAX_EVENTS + 1,
            observations: LvObservations::EventTimes,
            n_context: (3, 80),
            max_attempts: 10_000,
        }
    }
}

/// Where observations are placed along a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LvObservations {
    /// Distinct event times, drawn uniformly without replacement.
    #[default]
    EventTimes,
    /// Times uniform over the trajectory's span.
    UniformTimes,
}

/// Simulate until `max_time`, `max_events` events, or a zero total rate.
pub fn gillespie_lv(
    rates: &LvRates,
    initial_predators: u64,
    initial_prey: u64,
    seed: u64,
    max_time: f64,
    max_events: usize,
) -> Trajectory {
    let mut r = rng(seed);
    let (mut x, mut y) = (initial_predators, initial_prey);
    let mut t = 0.0;
    let mut traj = Trajectory {
        times: vec![0.0],
        predators: vec![x],
        prey: vec![y],
        stop: StopReason::Absorbed,
    };
    loop {
        if traj.events() >= max_events {
            traj.stop = StopReason::MaxEvents;
            break;
        }
        let Some((dt, event)) = next_event(rates, x, y, &mut r) else {
            traj.stop = StopReason::Absorbed;
            break;
        };
        if t + dt > max_time {
            traj.stop = StopReason::MaxTime;
            break;
        }
        t += dt;
        event.apply(&mut x, &mut y);
        traj.times.push(t);
        traj.predators.push(x);
        traj.prey.push(y);
    }
    traj
}

/// Why a trajectory could not be turned into a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum Rejection {
    #[error("trajectory spans more than {MAX_DURATION} time units")]
    TooLong,
    #[error("trajectory has more than {MAX_EVENTS} events")]
    TooManyEvents,
    #[error("a population is zero throughout")]
    ZeroChannel,
    #[error("trajectory has fewer than {POINTS_PER_TASK} states")]
    TooFewStates,
}

/// Apply the acceptance filters.
pub fn check_trajectory(traj: &Trajectory) -> Result<(), Rejection> {
    if traj.duration() > MAX_DURATION {
        return Err(Rejection::TooLong);
    }
    if traj.events() > MAX_EVENTS {
        return Err(Rejection::TooManyEvents);
    }
    if traj.predators.iter().all(|&v| v == 0) || traj.prey.iter().all(|&v| v == 0) {
        return Err(Rejection::ZeroChannel);
    }
    Ok(())
}

/// Filter a trajectory, scale populations by 2/7 and split `150` observed
/// states into `n ~ U{n_context}` context points and `150 - n` targets.
pub fn lv_to_task(traj: &Trajectory, cfg: &LvConfig, seed: u64) -> Result<Task, Rejection> {
    check_trajectory(traj)?;
    let mut r = rng(seed);
    let (lo, hi) = cfg.n_context;
    let n_context = r.random_range(lo..=hi.min(POINTS_PER_TASK - 1));
    let observe = |x: u64, y: u64, t: f64| Observation {
        x: t,
        y: vec![POPULATION_SCALE * x as f64, POPULATION_SCALE * y as f64],
    };
    let points: Vec<Observation> = match cfg.observations {
        LvObservations::EventTimes => {
            if traj.times.len() < POINTS_PER_TASK {
                return Err(Rejection::TooFewStates);
            }
            sample_indices(&mut r, traj.times.len(), POINTS_PER_TASK)
                .into_iter()
                .map(|i| observe(traj.predators[i], traj.prey[i], traj.times[i]))
                .collect()
        }
        LvObservations::UniformTimes => {
            let span = cfg.max_time.max(traj.duration());
            (0..POINTS_PER_TASK)
                .map(|_| {
                    let t = r.random_range(0.0..span);
                    let (x, y) = traj.state_at(t);
                    observe(x, y, t)
                })
                .collect()
        }
    };
    let mut points = points;
    let target = points.split_off(n_context);
    Ok(Task {
        context: points,
        target,
        meta: TaskMeta {
            process: "lotka_volterra".into(),
            seed,
        },
    })
}

/// Outcome of [`sample_lv_task`], with the number of rejected trajectories.
#[derive(Clone, Debug)]
pub struct LvSample {
    pub task: Task,
    pub attempts: usize,
}

/// Simulate trajectories from seeds derived from `seed` until one passes the
/// filters.
pub fn sample_lv_task(cfg: &LvConfig, seed: u64) -> Option<LvSample> {
    for attempt in 0..cfg.max_attempts {
        let sim_seed = crate::rng::derive_seed(seed, 0x4c56, attempt as u64);
        let traj = gillespie_lv(
            &cfg.rates,
            cfg.initial_predators,
            cfg.initial_prey,
            sim_seed,
            cfg.max_time,
            cfg.max_events,
        );
        if let Ok(mut task) = lv_to_task(&traj, cfg, sim_seed) {
            task.meta.seed = seed;
            return Some(LvSample {
                task,
                attempts: attempt + 1,
            });
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_rate_arithmetic() {
        let rates = LvRates::default();
        assert_eq!(rates.total_rate(50, 100), 225.0);
    }

    #[test]
    fn empty_population_terminates_immediately() {
        let traj = gillespie_lv(&LvRates::default(), 0, 0, 1, 100.0, 10_001);
        assert_eq!(traj.events(), 0);
        assert_eq!(traj.stop, StopReason::Absorbed);
    }

    #[test]
    fn populations_move_by_one_and_time_increases() {
        let traj = gillespie_lv(&LvRates::default(), 50, 100, 3, 100.0, 5_000);
        for w in 0..traj.events() {
            let dx = traj.predators[w + 1] as i64 - traj.predators[w] as i64;
            let dy = traj.prey[w + 1] as i64 - traj.prey[w] as i64;
            assert_eq!(dx.abs() + dy.abs(), 1);
            assert!(traj.times[w + 1] > traj.times[w]);
        }
    }

    fn fake_trajectory(events: usize, dt: f64) -> Trajectory {
        Trajectory {
            times: (0..=events).map(|i| i as f64 * dt).collect(),
            predators: vec![7; events + 1],
            prey: vec![14; events + 1],
            stop: StopReason::MaxTime,
        }
    }

    #[test]
    fn filters_are_enforced() {
        assert_eq!(check_trajectory(&fake_trajectory(10_001, 0.001)), Err(Rejection::TooManyEvents));
        assert_eq!(check_trajectory(&fake_trajectory(10_000, 0.001)), Ok(()));
        assert_eq!(check_trajectory(&fake_trajectory(200, 0.51)), Err(Rejection::TooLong));
        let mut zero = fake_trajectory(200, 0.1);
        zero.prey.iter_mut().for_each(|v| *v = 0);
        assert_eq!(check_trajectory(&zero), Err(Rejection::ZeroChannel));
    }

    #[test]
    fn task_outputs_are_scaled_counts() {
        let traj = fake_trajectory(400, 0.1);
        let cfg = LvConfig::default();
        for seed in 0..20 {
            let task = lv_to_task(&traj, &cfg, seed).unwrap();
            assert_eq!(task.context.len() + task.target.len(), POINTS_PER_TASK);
            assert!((3..=80).contains(&task.context.len()));
            for o in task.context.iter().chain(&task.target) {
                assert_eq!(o.y, vec![2.0, 4.0]);
            }
        }
    }

    #[test]
    fn uniform_time_observations() {
        let traj = fake_trajectory(40, 1.0);
        let cfg = LvConfig {
            observations: LvObservations::UniformTimes,
            ..LvConfig::default()
        };
        let task = lv_to_task(&traj, &cfg, 1).unwrap();
        assert_eq!(task.context.len() + task.target.len(), POINTS_PER_TASK);
    }

    #[test]
    fn state_lookup_is_piecewise_constant() {
        let traj = Trajectory {
            times: vec![0.0, 1.0, 2.5],
            predators: vec![5, 4, 4],
            prey: vec![1, 1, 2],
            stop: StopReason::Absorbed,
        };
        assert_eq!(traj.state_at(0.5), (5, 1));
        assert_eq!(traj.state_at(1.0), (4, 1));
        assert_eq!(traj.state_at(9.0), (4, 2));
    }
}

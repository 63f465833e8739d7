use std::time::{Duration, Instant};

use chrono::Timelike;

/// Time source for samplers and the simulated executor. `now` is seconds
/// since the clock was created; `wall_seconds_of_day` advances with it.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
    fn wall_seconds_of_day(&self) -> f64;
    /// Sleeps `secs` of this clock's time.
    fn sleep(&self, secs: f64);
}

fn local_seconds_of_day() -> f64 {
    let t = chrono::Local::now();
    t.num_seconds_from_midnight() as f64 + t.nanosecond() as f64 * 1e-9
}

#[derive(Debug, Clone)]
pub struct RealClock {
    start: Instant,
    wall0: f64,
}

impl RealClock {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
            wall0: local_seconds_of_day(),
        }
    }
}

impl Default for RealClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for RealClock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn wall_seconds_of_day(&self) -> f64 {
        self.wall0 + self.now()
    }

    fn sleep(&self, secs: f64) {
        if secs > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(secs));
        }
    }
}

/// Virtual time running `divisor` times faster than real time, for tests
/// that exercise minute-long schedules in seconds.
#[derive(Debug, Clone)]
pub struct ScaledClock {
    start: Instant,
    wall0: f64,
    divisor: f64,
}

impl ScaledClock {
    pub fn new(divisor: f64) -> Self {
        assert!(divisor >= 1.0, "time divisor must be >= 1");
        Self {
            start: Instant::now(),
            wall0: local_seconds_of_day(),
            divisor,
        }
    }

    pub fn divisor(&self) -> f64 {
        self.divisor
    }
}

impl Clock for ScaledClock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * self.divisor
    }

    fn wall_seconds_of_day(&self) -> f64 {
        self.wall0 + self.now()
    }

    fn sleep(&self, secs: f64) {
        if secs > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(secs / self.divisor));
        }
    }
}

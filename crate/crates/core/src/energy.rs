//! Unit-battery energy harvesting: Bernoulli arrivals fill a one-slot
//! battery, participation drains it, surplus arrivals are lost.

use crate::error::{Error, Result};
use crate::rng::rng_from;
use rand::Rng;
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyState {
    battery: Vec<bool>,
    p_e: Vec<f64>,
}

impl EnergyState {
    /// All batteries start empty.
    pub fn new(p_e: Vec<f64>) -> Result<Self> {
        if p_e.is_empty() {
            return Err(Error::Empty("harvest probabilities"));
        }
        for (m, &p) in p_e.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::Config(format!(
                    "harvest probability of user {m} must be in [0, 1], got {p}"
                )));
            }
        }
        let battery = vec![false; p_e.len()];
        Ok(Self { battery, p_e })
    }

    /// Uniform arrival probability across `num_users` users.
    pub fn uniform(num_users: usize, p_e: f64) -> Result<Self> {
        Self::new(vec![p_e; num_users])
    }

    pub fn with_battery(mut self, battery: Vec<bool>) -> Result<Self> {
        if battery.len() != self.p_e.len() {
            return Err(Error::DimensionMismatch {
                context: "battery state",
                expected: self.p_e.len(),
                actual: battery.len(),
            });
        }
        self.battery = battery;
        Ok(self)
    }

    pub fn num_users(&self) -> usize {
        self.battery.len()
    }

    pub fn battery(&self) -> &[bool] {
        &self.battery
    }

    pub fn p_e(&self) -> &[f64] {
        &self.p_e
    }

    pub fn full_count(&self) -> usize {
        self.battery.iter().filter(|&&b| b).count()
    }
}

/// One harvest step: each user independently receives a unit of energy with
/// its arrival probability; a full battery stays full (surplus is lost).
pub fn harvest(state: &EnergyState, seed: u64) -> EnergyState {
    let mut rng = rng_from(seed, &[]);
    let battery = state
        .battery
        .iter()
        .zip(&state.p_e)
        .map(|(&full, &p)| {
            let arrival = rng.random::<f64>() < p;
            full || arrival
        })
        .collect();
    EnergyState { battery, p_e: state.p_e.clone() }
}

/// Users that currently hold enough energy to participate in a round.
pub fn feasible_users(state: &EnergyState) -> BTreeSet<usize> {
    state
        .battery
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(m, _)| m)
        .collect()
}

/// Drains the battery of every scheduled user. Scheduling a user whose
/// battery is empty is a caller bug and returns an error.
pub fn consume(state: &EnergyState, scheduled: &BTreeSet<usize>) -> Result<EnergyState> {
    let mut battery = state.battery.clone();
    for &m in scheduled {
        if m >= battery.len() {
            return Err(Error::Config(format!(
                "scheduled user {m} out of range for {} users",
                battery.len()
            )));
        }
        if !battery[m] {
            return Err(Error::EmptyBattery { user: m });
        }
        battery[m] = false;
    }
    Ok(EnergyState { battery, p_e: state.p_e.clone() })
}

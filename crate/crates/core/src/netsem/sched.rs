//! Schedulers choosing the next step label.
//!
//! The fair policy gives every enabled thread and every resolvable message
//! bounded service: an item whose age reaches its window is served before any
//! random pick, most-overdue first. Under contention the worst-case wait is
//! the window plus the number of simultaneously overdue items, which keeps
//! starvation bounded without fixing a round-robin order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Machine, MsgId, StepLabel, ThreadStatus, Tid};

/// Bounded-fairness parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairParams {
    /// Service window for enabled threads.
    pub thread_window: u32,
    /// Service window for resolvable messages.
    pub msg_window: u32,
    /// Probability that resolving a message drops it instead of delivering.
    pub drop_p: f64,
    /// Max consecutive drops on one route before a delivery is forced.
    pub route_drop_cap: u32,
}

impl Default for FairParams {
    fn default() -> Self {
        FairParams { thread_window: 8, msg_window: 32, drop_p: 0.0, route_drop_cap: 3 }
    }
}

#[derive(Clone, Debug)]
pub enum Policy {
    /// Age-tracked bounded fairness with lossy delivery.
    Fair(FairParams),
    /// Uniform choice among enabled steps; no service guarantee.
    Random { drop_p: f64 },
    /// Fair for everything except messages from `src` to `dst`, which are
    /// never resolved. Exists to defeat delivery-fairness certificates.
    StarveRoute { params: FairParams, src: String, dst: String },
    /// Fixed label sequence; ends the run when exhausted.
    Script(Vec<StepLabel>),
}

/// Candidate step before the drop coin is flipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pick {
    Thread(Tid),
    Resolve(MsgId),
}

pub struct Scheduler {
    policy: Policy,
    rng: ChaCha8Rng,
    thread_age: Vec<u32>,
    msg_age: BTreeMap<MsgId, u32>,
    route_drops: BTreeMap<(String, String), u32>,
    script_pos: usize,
}

impl Scheduler {
    pub fn new(policy: Policy, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        Scheduler {
            policy,
            rng,
            thread_age: Vec::new(),
            msg_age: BTreeMap::new(),
            route_drops: BTreeMap::new(),
            script_pos: 0,
        }
    }

    /// Chooses the next step, or `None` when nothing is enabled (or the
    /// script ended). Updates fairness bookkeeping assuming the step runs.
    pub fn next(&mut self, m: &Machine) -> Option<StepLabel> {
        match &self.policy {
            Policy::Script(labels) => {
                let l = labels.get(self.script_pos).copied();
                self.script_pos += 1;
                l
            }
            Policy::Random { drop_p } => {
                let drop_p = *drop_p;
                self.pick_random(m, drop_p)
            }
            Policy::Fair(params) => {
                let params = params.clone();
                self.pick_fair(m, &params, None)
            }
            Policy::StarveRoute { params, src, dst } => {
                let params = params.clone();
                let (src, dst) = (src.clone(), dst.clone());
                self.pick_fair(m, &params, Some((src, dst)))
            }
        }
    }

    fn enabled_threads(m: &Machine) -> Vec<Tid> {
        m.config
            .threads
            .iter()
            .enumerate()
            .filter(|(_, t)| !matches!(t.status, ThreadStatus::Halted(_)))
            .map(|(i, _)| Tid(i as u32))
            .collect()
    }

    /// Messages eligible for resolution: deliverable ones always, and
    /// undeliverable ones only when drops can clear them.
    fn resolvable(m: &Machine, drop_p: f64, starve: Option<&(String, String)>) -> Vec<MsgId> {
        m.config
            .soup
            .iter()
            .copied()
            .filter(|id| {
                if let Some((src, dst)) = starve {
                    let msg = m.message(*id);
                    if msg.from.ip == *src && msg.to.ip == *dst {
                        return false;
                    }
                }
                m.deliverable(*id) || drop_p > 0.0
            })
            .collect()
    }

    fn pick_random(&mut self, m: &Machine, drop_p: f64) -> Option<StepLabel> {
        let threads = Self::enabled_threads(m);
        let msgs = Self::resolvable(m, drop_p, None);
        let total = threads.len() + msgs.len();
        if total == 0 {
            return None;
        }
        let i = self.rng.gen_range(0..total);
        let pick = if i < threads.len() {
            Pick::Thread(threads[i])
        } else {
            Pick::Resolve(msgs[i - threads.len()])
        };
        Some(self.finish(m, pick, drop_p, u32::MAX))
    }

    fn pick_fair(
        &mut self,
        m: &Machine,
        params: &FairParams,
        starve: Option<(String, String)>,
    ) -> Option<StepLabel> {
        let threads = Self::enabled_threads(m);
        let msgs = Self::resolvable(m, params.drop_p, starve.as_ref());
        if threads.is_empty() && msgs.is_empty() {
            return None;
        }

        self.thread_age.resize(m.thread_count(), 0);
        self.msg_age.retain(|id, _| m.config.soup.contains(id));
        for id in &m.config.soup {
            self.msg_age.entry(*id).or_insert(0);
        }

        // Most-overdue item first; messages beat threads on ties, smaller ids
        // break the rest. `lateness` is how far past the window the item is.
        let mut best: Option<(u32, Pick)> = None;
        for id in &msgs {
            let age = self.msg_age[id];
            if age + 1 >= params.msg_window {
                let lateness = age + 1 - params.msg_window;
                let cand = (lateness, Pick::Resolve(*id));
                if Self::more_overdue(&cand, &best) {
                    best = Some(cand);
                }
            }
        }
        for t in &threads {
            let age = self.thread_age[t.0 as usize];
            if age + 1 >= params.thread_window {
                let lateness = age + 1 - params.thread_window;
                let cand = (lateness, Pick::Thread(*t));
                if Self::more_overdue(&cand, &best) {
                    best = Some(cand);
                }
            }
        }

        let pick = match best {
            Some((_, p)) => p,
            None => {
                let total = threads.len() + msgs.len();
                let i = self.rng.gen_range(0..total);
                if i < threads.len() {
                    Pick::Thread(threads[i])
                } else {
                    Pick::Resolve(msgs[i - threads.len()])
                }
            }
        };

        // Age everything that stays waiting; reset the served item.
        for t in &threads {
            self.thread_age[t.0 as usize] += 1;
        }
        for age in self.msg_age.values_mut() {
            *age += 1;
        }
        match pick {
            Pick::Thread(t) => self.thread_age[t.0 as usize] = 0,
            Pick::Resolve(id) => {
                self.msg_age.remove(&id);
            }
        }

        Some(self.finish(m, pick, params.drop_p, params.route_drop_cap))
    }

    fn more_overdue(cand: &(u32, Pick), best: &Option<(u32, Pick)>) -> bool {
        match best {
            None => true,
            Some(b) => {
                let rank = |p: &Pick| match p {
                    Pick::Resolve(id) => (0u8, id.0),
                    Pick::Thread(t) => (1u8, t.0 as u64),
                };
                (cand.0, std::cmp::Reverse(rank(&cand.1)))
                    > (b.0, std::cmp::Reverse(rank(&b.1)))
            }
        }
    }

    /// Turns a pick into a label, flipping the drop coin for messages. The
    /// route cap converts a would-be drop into a delivery once a route has
    /// eaten `cap` consecutive drops, so lossy runs cannot silently sever one
    /// link forever.
    fn finish(&mut self, m: &Machine, pick: Pick, drop_p: f64, cap: u32) -> StepLabel {
        match pick {
            Pick::Thread(t) => StepLabel::Thread(t),
            Pick::Resolve(id) => {
                let msg = m.message(id);
                let route = (msg.from.ip.clone(), msg.to.ip.clone());
                let deliverable = m.deliverable(id);
                let mut drop = drop_p > 0.0 && self.rng.gen_bool(drop_p);
                if !deliverable {
                    drop = true;
                }
                if drop && deliverable && cap != u32::MAX {
                    let seen = self.route_drops.get(&route).copied().unwrap_or(0);
                    if seen >= cap {
                        drop = false;
                    }
                }
                if drop {
                    *self.route_drops.entry(route).or_insert(0) += 1;
                    StepLabel::Drop(id)
                } else {
                    self.route_drops.insert(route, 0);
                    StepLabel::Deliver(id)
                }
            }
        }
    }
}

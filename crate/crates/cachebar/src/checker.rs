//! Exhaustive-state checker for the two-domain copy-on-access model.
//!
//! The model tracks two physical pages (their cached-content flags), the
//! page each domain's virtual page resolves to, and the lifecycle state of
//! page 0, which both domains initially share. The victim repeatedly
//! accesses its page; the attacker alternates Flush and Reload on its page;
//! an always-enabled timer demotes the page and merges copies back. The
//! non-interference property: an attacker that flushed its page must find
//! it uncached on reload. Breadth-first exploration either verifies the
//! property over the full reachable space or returns a shortest violating
//! trace.

use std::collections::{HashMap, HashSet, VecDeque};

use thiserror::Error;

use crate::lifecycle::PageState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Actor {
    Attacker,
    Victim,
    Timer,
}

impl std::fmt::Display for Actor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Actor::Attacker => "attacker",
            Actor::Victim => "victim",
            Actor::Timer => "timer",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum McOwner {
    Nobody,
    Attacker,
    Victim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepLabel {
    VictimAccess,
    AttackerFlush,
    AttackerReload,
    TimerDemote,
    TimerMerge,
}

impl std::fmt::Display for StepLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StepLabel::VictimAccess => "access",
            StepLabel::AttackerFlush => "flush",
            StepLabel::AttackerReload => "reload",
            StepLabel::TimerDemote => "demote",
            StepLabel::TimerMerge => "merge",
        };
        f.write_str(s)
    }
}

/// Model-checker state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct McState {
    /// Cached-content flags for physical pages 0 and 1.
    pub pages: [bool; 2],
    /// Physical page index the attacker's virtual page maps to.
    pub virt_attacker: u8,
    /// Physical page index the victim's virtual page maps to.
    pub virt_victim: u8,
    /// Lifecycle state of page 0 (the shared page).
    pub state: PageState,
    /// Last promoter / exclusive holder of page 0.
    pub owner: McOwner,
    /// Protocol phase: the attacker has flushed and owes a reload.
    pub reload_armed: bool,
}

impl McState {
    pub fn initial() -> Self {
        McState {
            pages: [false, false],
            virt_attacker: 0,
            virt_victim: 0,
            state: PageState::Shared,
            owner: McOwner::Nobody,
            reload_armed: false,
        }
    }
}

impl std::fmt::Display for McState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "pages=[{},{}] virt_a={} virt_v={} state={} owner={}",
            self.pages[0] as u8,
            self.pages[1] as u8,
            self.virt_attacker,
            self.virt_victim,
            self.state,
            match self.owner {
                McOwner::Nobody => "none",
                McOwner::Attacker => "attacker",
                McOwner::Victim => "victim",
            }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Flush page 0 when the timer demotes it from ACCESSED to SHARED.
    pub flush_on_demote: bool,
    /// Flush page 0 when the timer merges the copy back.
    pub flush_on_merge: bool,
    /// Constrain the attacker to alternate Flush then Reload. Relaxing this
    /// explores arbitrary interleavings.
    pub flush_reload_protocol: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { flush_on_demote: true, flush_on_merge: true, flush_reload_protocol: true }
    }
}

/// One atomic successor step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Successor {
    pub actor: Actor,
    pub label: StepLabel,
    pub state: McState,
    /// The reload assertion `pages[virt] == 0` failed in this step.
    pub violation: bool,
}

/// Page-0 lifecycle transitions shared by every memory operation: promote a
/// SHARED page, or redirect the actor to the copy page when someone else
/// owns the ACCESSED page. Returns the page index the operation lands on.
fn apply_transitions(s: &mut McState, actor: Actor) -> u8 {
    let me = match actor {
        Actor::Attacker => McOwner::Attacker,
        Actor::Victim => McOwner::Victim,
        Actor::Timer => unreachable!("timer does not access memory"),
    };
    let virt = match actor {
        Actor::Attacker => &mut s.virt_attacker,
        Actor::Victim => &mut s.virt_victim,
        Actor::Timer => unreachable!(),
    };
    if *virt != 0 {
        return *virt; // private copy: no transition
    }
    match s.state {
        PageState::Shared => {
            s.state = PageState::Accessed;
            s.owner = me;
        }
        PageState::Accessed if s.owner == me => {}
        PageState::Accessed => {
            // Copy-on-access: this domain is redirected to page 1.
            *virt = 1;
            s.state = PageState::Exclusive;
        }
        PageState::Exclusive => {
            debug_assert_eq!(s.owner, me, "page 0 exclusive to the other domain yet mapped");
        }
        PageState::Unmapped => unreachable!("the model never unmaps"),
    }
    match actor {
        Actor::Attacker => s.virt_attacker,
        Actor::Victim => s.virt_victim,
        Actor::Timer => unreachable!(),
    }
}

/// All atomic steps enabled in `s`.
pub fn successors(s: &McState, cfg: &ModelConfig) -> Vec<Successor> {
    let mut out = Vec::with_capacity(5);

    // Victim access: pages[virt] = 1.
    {
        let mut n = *s;
        let virt = apply_transitions(&mut n, Actor::Victim);
        n.pages[virt as usize] = true;
        out.push(Successor {
            actor: Actor::Victim,
            label: StepLabel::VictimAccess,
            state: n,
            violation: false,
        });
    }

    // Attacker flush: same transitions as a load, then pages[virt] = 0.
    if !cfg.flush_reload_protocol || !s.reload_armed {
        let mut n = *s;
        let virt = apply_transitions(&mut n, Actor::Attacker);
        n.pages[virt as usize] = false;
        n.reload_armed = true;
        out.push(Successor {
            actor: Actor::Attacker,
            label: StepLabel::AttackerFlush,
            state: n,
            violation: false,
        });
    }

    // Attacker reload: assert pages[virt] == 0, then set it to 1.
    if !cfg.flush_reload_protocol || s.reload_armed {
        let mut n = *s;
        let virt = apply_transitions(&mut n, Actor::Attacker);
        let violation = n.pages[virt as usize];
        n.pages[virt as usize] = true;
        n.reload_armed = false;
        out.push(Successor {
            actor: Actor::Attacker,
            label: StepLabel::AttackerReload,
            state: n,
            violation,
        });
    }

    // Timer demote: ACCESSED -> SHARED.
    if s.state == PageState::Accessed {
        let mut n = *s;
        n.state = PageState::Shared;
        n.owner = McOwner::Nobody;
        if cfg.flush_on_demote {
            n.pages[0] = false;
        }
        out.push(Successor {
            actor: Actor::Timer,
            label: StepLabel::TimerDemote,
            state: n,
            violation: false,
        });
    }

    // Timer merge: both domains point back at page 0; the copy frame is
    // freed, so its cached flag resets regardless of the security fix.
    {
        let mut n = *s;
        n.virt_attacker = 0;
        n.virt_victim = 0;
        n.owner = McOwner::Nobody;
        n.state = PageState::Shared;
        n.pages[1] = false;
        if cfg.flush_on_merge {
            n.pages[0] = false;
        }
        out.push(Successor {
            actor: Actor::Timer,
            label: StepLabel::TimerMerge,
            state: n,
            violation: false,
        });
    }

    out
}

/// One step of a counterexample trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceStep {
    pub actor: Actor,
    pub label: StepLabel,
    pub state: McState,
    pub violation: bool,
}

/// A violating run from the initial state; the last step carries the failed
/// reload assertion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl std::fmt::Display for Trace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "initial: {}", McState::initial())?;
        for (i, step) in self.steps.iter().enumerate() {
            writeln!(
                f,
                "step {}: {} {}{} -> {}",
                i + 1,
                step.actor,
                step.label,
                if step.violation { " (reload found a cached line: violation)" } else { "" },
                step.state
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    /// The property holds over the whole reachable space.
    Verified { reachable_states: usize },
    Violation { trace: Trace },
}

/// Breadth-first exploration from the initial state; returns a shortest
/// violating trace, or `Verified` with the exact reachable-state count.
pub fn explore(cfg: &ModelConfig) -> Outcome {
    let init = McState::initial();
    let mut visited: HashSet<McState> = HashSet::new();
    let mut parent: HashMap<McState, (McState, Actor, StepLabel)> = HashMap::new();
    let mut queue: VecDeque<McState> = VecDeque::new();
    visited.insert(init);
    queue.push_back(init);

    while let Some(s) = queue.pop_front() {
        for succ in successors(&s, cfg) {
            if succ.violation {
                let mut steps = vec![TraceStep {
                    actor: succ.actor,
                    label: succ.label,
                    state: succ.state,
                    violation: true,
                }];
                let mut cur = s;
                while let Some((prev, actor, label)) = parent.get(&cur) {
                    steps.push(TraceStep { actor: *actor, label: *label, state: cur, violation: false });
                    cur = *prev;
                }
                steps.reverse();
                return Outcome::Violation { trace: Trace { steps } };
            }
            if visited.insert(succ.state) {
                parent.insert(succ.state, (s, succ.actor, succ.label));
                queue.push_back(succ.state);
            }
        }
    }
    Outcome::Verified { reachable_states: visited.len() }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MinimizeError {
    #[error("step {step}: {actor} {label} is not a legal successor")]
    IllegalStep { step: usize, actor: Actor, label: StepLabel },
    #[error("trace does not end in a violation")]
    NotViolating,
    #[error("configuration verifies; no violating trace exists")]
    Verifies,
}

/// Validates that `trace` is a violating run under `cfg`, then returns a
/// violating trace of minimal length (re-running the breadth-first search).
pub fn minimize(trace: &Trace, cfg: &ModelConfig) -> Result<Trace, MinimizeError> {
    let mut cur = McState::initial();
    let mut violated = false;
    for (i, step) in trace.steps.iter().enumerate() {
        let succ = successors(&cur, cfg)
            .into_iter()
            .find(|c| c.actor == step.actor && c.label == step.label && c.state == step.state)
            .ok_or(MinimizeError::IllegalStep { step: i + 1, actor: step.actor, label: step.label })?;
        violated = succ.violation;
        cur = succ.state;
    }
    if !violated {
        return Err(MinimizeError::NotViolating);
    }
    match explore(cfg) {
        Outcome::Violation { trace } => Ok(trace),
        Outcome::Verified { .. } => Err(MinimizeError::Verifies),
    }
}

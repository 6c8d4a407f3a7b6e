use serde::{Deserialize, Serialize};

/// A label that occupies one bit of a [`LabelSet`].
pub trait LabelKind: Copy {
    fn bit(self) -> u8;
    fn name(self) -> &'static str;
}

/// Environment taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvLabel {
    /// Multiple-route junction.
    Jct,
    /// Occluded or poorly signed segment.
    Occ,
    /// Multi-level or vertical transition.
    Mult,
    /// Dynamic or crowded area.
    Crowd,
    /// Sudden spatial transition.
    St,
}

impl EnvLabel {
    pub const ALL: [EnvLabel; 5] = [
        EnvLabel::Jct,
        EnvLabel::Occ,
        EnvLabel::Mult,
        EnvLabel::Crowd,
        EnvLabel::St,
    ];
}

impl LabelKind for EnvLabel {
    fn bit(self) -> u8 {
        self as u8
    }

    fn name(self) -> &'static str {
        match self {
            EnvLabel::Jct => "JCT",
            EnvLabel::Occ => "OCC",
            EnvLabel::Mult => "MULT",
            EnvLabel::Crowd => "CROWD",
            EnvLabel::St => "ST",
        }
    }
}

/// Trajectory and head-movement behaviours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BehaviorLabel {
    Hes,
    Wrong,
    Back,
    Scan,
    Confirm,
    Lb,
}

impl BehaviorLabel {
    pub const ALL: [BehaviorLabel; 6] = [
        BehaviorLabel::Hes,
        BehaviorLabel::Wrong,
        BehaviorLabel::Back,
        BehaviorLabel::Scan,
        BehaviorLabel::Confirm,
        BehaviorLabel::Lb,
    ];

    /// Behaviours treated as difficulty events in the uncertainty analysis.
    pub const DIFFICULTY: [BehaviorLabel; 5] = [
        BehaviorLabel::Hes,
        BehaviorLabel::Wrong,
        BehaviorLabel::Back,
        BehaviorLabel::Scan,
        BehaviorLabel::Lb,
    ];
}

impl LabelKind for BehaviorLabel {
    fn bit(self) -> u8 {
        self as u8
    }

    fn name(self) -> &'static str {
        match self {
            BehaviorLabel::Hes => "HES",
            BehaviorLabel::Wrong => "WRONG",
            BehaviorLabel::Back => "BACK",
            BehaviorLabel::Scan => "SCAN",
            BehaviorLabel::Confirm => "CONFIRM",
            BehaviorLabel::Lb => "LB",
        }
    }
}

/// Bitmask of labels at one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet(pub u8);

impl LabelSet {
    pub const EMPTY: LabelSet = LabelSet(0);

    pub fn of<L: LabelKind>(labels: &[L]) -> Self {
        labels.iter().fold(LabelSet::EMPTY, |s, l| s.with(*l))
    }

    pub fn has<L: LabelKind>(self, label: L) -> bool {
        self.0 & (1 << label.bit()) != 0
    }

    pub fn with<L: LabelKind>(self, label: L) -> Self {
        LabelSet(self.0 | (1 << label.bit()))
    }

    pub fn insert<L: LabelKind>(&mut self, label: L) {
        *self = self.with(label);
    }

    pub fn union(self, other: LabelSet) -> Self {
        LabelSet(self.0 | other.0)
    }

    pub fn intersects(self, other: LabelSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Multi-hot vector over `all`, in order.
    pub fn to_multi_hot<L: LabelKind>(self, all: &[L]) -> Vec<f64> {
        all.iter()
            .map(|l| if self.has(*l) { 1.0 } else { 0.0 })
            .collect()
    }
}

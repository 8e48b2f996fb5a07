//! Binding of named parameters onto a tape for one forward pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::linalg::{Matrix, Rng};

/// What a parameter is for. Checkpoints record it; training modes decide
/// from it which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Pre-trained backbone weights (W₀, b₀, embeddings, norms).
    Frozen,
    /// Low-rank adapter factors.
    Adapter,
    /// Classification head.
    Head,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Frozen => "frozen",
            Role::Adapter => "adapter",
            Role::Head => "head",
        }
    }
}

/// A parameter placed on the tape.
#[derive(Clone, Debug)]
pub struct Binding {
    pub name: String,
    pub node: NodeId,
    pub role: Role,
}

/// Tape plus everything a layer needs to run forward: which roles are
/// trainable, whether adapter branches participate, and the dropout stream.
#[derive(Debug)]
pub struct ForwardCtx {
    pub tape: Tape,
    pub training: bool,
    /// When false, adapted layers behave as their frozen base layer.
    pub use_adapters: bool,
    /// Dropout on the MLP hidden activations, training only.
    pub hidden_dropout: f64,
    trainable: [bool; 3],
    bindings: Vec<Binding>,
    rng: Rng,
}

fn role_slot(role: Role) -> usize {
    match role {
        Role::Frozen => 0,
        Role::Adapter => 1,
        Role::Head => 2,
    }
}

impl ForwardCtx {
    pub fn new(trainable: &[Role], training: bool, dropout_rng: Rng) -> Self {
        let mut mask = [false; 3];
        for r in trainable {
            mask[role_slot(*r)] = true;
        }
        Self {
            tape: Tape::new(),
            training,
            use_adapters: true,
            hidden_dropout: 0.0,
            trainable: mask,
            bindings: Vec::new(),
            rng: dropout_rng,
        }
    }

    /// Nothing trainable, no dropout.
    pub fn eval() -> Self {
        Self::new(&[], false, Rng::new(0))
    }

    pub fn is_trainable(&self, role: Role) -> bool {
        self.trainable[role_slot(role)]
    }

    /// Places a parameter on the tape as a leaf.
    pub fn param(&mut self, name: impl Into<String>, value: &Matrix, role: Role) -> NodeId {
        let node = self.tape.leaf(value.clone(), self.is_trainable(role));
        self.bindings.push(Binding {
            name: name.into(),
            node,
            role,
        });
        node
    }

    pub fn dropout(&mut self, x: NodeId, p: f64) -> crate::Result<NodeId> {
        let training = self.training;
        self.tape.dropout(x, p, &mut self.rng, training)
    }

    pub fn bindings(&self) -> &[Binding] {
        &self.bindings
    }

    /// Gradient of every bound, trainable parameter, by name.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(String, Matrix)> {
        self.bindings
            .iter()
            .filter_map(|b| grads.take(b.node).map(|g| (b.name.clone(), g)))
            .collect()
    }
}

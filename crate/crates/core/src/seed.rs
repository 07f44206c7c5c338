//! Master-seed expansion into independent per-component random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Consumers of randomness. Each gets its own ChaCha stream, so toggling one
/// component never shifts the draws seen by another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Market,
    ExpertInit,
    ExpertShuffle,
    RouterInit,
    RouterShuffle,
}

impl Component {
    fn stream(self) -> u64 {
        match self {
            Component::Market => 1,
            Component::ExpertInit => 2,
            Component::ExpertShuffle => 3,
            Component::RouterInit => 4,
            Component::RouterShuffle => 5,
        }
    }
}

pub fn component_rng(master: u64, component: Component) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(component.stream());
    rng
}

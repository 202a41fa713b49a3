//! Fixed 64-word vocabulary for scenario descriptions.

use crate::rng::Rng;

use super::AgentClass;

pub const PAD: u16 = 0;
pub const BOS: u16 = 1;
pub const MAX_TOKENS: usize = 32;

/// Token id `i` is `VOCAB[i]`.
pub const VOCAB: [&str; 64] = [
    "<pad>", "<bos>", // 0-1
    "clear", "rain", "fog", "night", // 2-5 weather
    "urban", "highway", "intersection", "rural", // 6-9 road
    "pedestrian", "car", "motorcycle", "bus", "cyclist", // 10-14 classes
    "one", "two", "several", "many", // 15-18 counts
    "crossing", "suddenly", "cut", "in", "running", "red", "wrong", "way", "merging", "fast", "door",
    "opening", // 19-30 hazard bigrams
    "light", "traffic", "steady", "flow", "parked", "vehicles", "open", "road", "slow", "queue", // 31-40 benign bigrams
    "the", "ahead", "near", "left", "right", "lane", "sidewalk", "signal", "shoulder", "median", "curb", "turn",
    "straight", "oncoming", "behind", "distance", "gap", "speed", "zone", "school", "work", "bridge", "tunnel",
    // 41-63 filler
];

/// Two-token scenario phrases that hint at an imminent conflict.
pub const HAZARD_BIGRAMS: [[u16; 2]; 6] = [[10, 19], [20, 19], [21, 22], [23, 24], [25, 26], [29, 30]];

/// Two-token phrases describing calm traffic.
pub const BENIGN_BIGRAMS: [[u16; 2]; 5] = [[31, 32], [33, 34], [35, 36], [37, 38], [39, 40]];

const FILLER: std::ops::Range<u16> = 41..64;

pub fn word(id: u16) -> Option<&'static str> {
    VOCAB.get(id as usize).copied()
}

pub fn class_token(class: AgentClass) -> u16 {
    10 + class.index() as u16
}

fn count_token(n: usize) -> u16 {
    match n {
        0 | 1 => 15,
        2 => 16,
        3 | 4 => 17,
        _ => 18,
    }
}

/// Builds a padded description: weather, road type, agent count and classes,
/// one scenario bigram and a few filler words.
pub fn describe(rng: &mut Rng, classes: &[AgentClass], hazard_phrase: bool) -> Vec<u16> {
    let mut t = vec![BOS, 2 + rng.below(0, 4) as u16, 6 + rng.below(0, 4) as u16];
    t.push(count_token(classes.len()));
    let mut seen = [false; 5];
    for c in classes {
        if !seen[c.index()] {
            seen[c.index()] = true;
            t.push(class_token(*c));
        }
    }
    let bigram = if hazard_phrase {
        HAZARD_BIGRAMS[rng.below(0, HAZARD_BIGRAMS.len())]
    } else {
        BENIGN_BIGRAMS[rng.below(0, BENIGN_BIGRAMS.len())]
    };
    t.extend_from_slice(&bigram);
    for _ in 0..rng.below(3, 9) {
        t.push(rng.below(FILLER.start as usize, FILLER.end as usize) as u16);
    }
    t.truncate(MAX_TOKENS);
    t.resize(MAX_TOKENS, PAD);
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_unique_and_complete() {
        let mut words: Vec<_> = VOCAB.to_vec();
        words.sort();
        words.dedup();
        assert_eq!(words.len(), 64);
        assert_eq!(word(22), Some("in"));
        assert_eq!(word(64), None);
    }

    #[test]
    fn descriptions_are_padded() {
        let mut rng = Rng::new(3);
        let t = describe(&mut rng, &[AgentClass::Car, AgentClass::Car, AgentClass::Bus], true);
        assert_eq!(t.len(), MAX_TOKENS);
        assert_eq!(t[0], BOS);
        assert_eq!(t[3], count_token(3));
        assert!(t.iter().all(|&id| (id as usize) < VOCAB.len()));
        let has_hazard = HAZARD_BIGRAMS
            .iter()
            .any(|b| t.windows(2).any(|w| w == b));
        assert!(has_hazard);
    }
}

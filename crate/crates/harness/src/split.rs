use std::ops::Range;

/// Contiguous train/val/test ranges in `8:1:1` proportion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub const SPLIT_WEIGHTS: [usize; 3] = [8, 1, 1];

impl SplitSpec {
    /// Largest-remainder rounding of `samples * [0.8, 0.1, 0.1]`; equal
    /// remainders favour train, then val.
    pub fn new(samples: usize) -> Self {
        let total: usize = SPLIT_WEIGHTS.iter().sum();
        let mut counts = SPLIT_WEIGHTS.map(|w| samples * w / total);
        let rem = SPLIT_WEIGHTS.map(|w| samples * w % total);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
        let missing = samples - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        let (a, b) = (counts[0], counts[0] + counts[1]);
        Self {
            train: 0..a,
            val: a..b,
            test: b..samples,
        }
    }

    pub fn get(&self, part: Part) -> Range<usize> {
        match part {
            Part::Train => self.train.clone(),
            Part::Val => self.val.clone(),
            Part::Test => self.test.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        }
    }
}

impl std::str::FromStr for Part {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Part::Train),
            "val" => Ok(Part::Val),
            "test" => Ok(Part::Test),
            _ => Err(format!("unknown split `{s}` (train, val or test)")),
        }
    }
}

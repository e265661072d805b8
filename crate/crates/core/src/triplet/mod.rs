//! Triplet supervision: selection regimes, the hinge objective and training.

mod loss;
mod sampling;
mod train;

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{rejected, Error, Result};

pub use loss::{triplet_loss, triplet_loss_backward, LossValue, TripletGrads};
pub use sampling::{sample_triplets, validate_triplet, SamplerOptions, Verdict, Violation, MAX_REJECTIONS};
pub use train::{
    batch_gradient, gradient_check, mean_triplet_loss, train, train_regime, EmbeddingCache, EpochLoss, GradientCheck,
    ImageSet, TrainConfig, TrainOutcome,
};

/// Triplet selection regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Similar shares the anchor's disease, dissimilar does not.
    Disease,
    /// Mixture of disease triplets and unconstrained similarity-group triplets.
    Joint,
    /// Siblings as similar; dissimilar from another disease, never a cousin.
    Hierarchical,
    /// Siblings as similar; dissimilar from any other group, cousins included.
    NonHierarchical,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Disease, Regime::Joint, Regime::NonHierarchical, Regime::Hierarchical];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Disease => "disease",
            Regime::Joint => "joint",
            Regime::Hierarchical => "hierarchical",
            Regime::NonHierarchical => "non_hierarchical",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| rejected(format!("unknown regime {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    #[serde(rename = "anchor_id")]
    pub anchor: String,
    #[serde(rename = "similar_id")]
    pub similar: String,
    #[serde(rename = "dissimilar_id")]
    pub dissimilar: String,
    pub regime: Regime,
}

impl Triplet {
    pub fn new(anchor: &str, similar: &str, dissimilar: &str, regime: Regime) -> Self {
        Self { anchor: anchor.to_owned(), similar: similar.to_owned(), dissimilar: dissimilar.to_owned(), regime }
    }

    pub fn ids(&self) -> [&str; 3] {
        [&self.anchor, &self.similar, &self.dissimilar]
    }
}

/// Writes `anchor_id,similar_id,dissimilar_id,regime` CSV with a header line.
pub fn write_triplets_csv<W: Write>(triplets: &[Triplet], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    if triplets.is_empty() {
        w.write_record(["anchor_id", "similar_id", "dissimilar_id", "regime"])?;
    }
    for t in triplets {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn triplets_to_csv(triplets: &[Triplet]) -> String {
    let mut buf = Vec::new();
    write_triplets_csv(triplets, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is UTF-8")
}

pub fn read_triplets_csv<R: Read>(input: R) -> Result<Vec<Triplet>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers != vec!["anchor_id", "similar_id", "dissimilar_id", "regime"] {
        return Err(Error::Format(format!("unexpected triplet CSV header {headers:?}")));
    }
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_names() {
        for r in Regime::ALL {
            assert_eq!(r.as_str().parse::<Regime>().unwrap(), r);
        }
        assert!("cousins".parse::<Regime>().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ts = vec![
            Triplet::new("a", "b", "c", Regime::Hierarchical),
            Triplet::new("x", "y", "z", Regime::NonHierarchical),
        ];
        let text = triplets_to_csv(&ts);
        assert!(text.starts_with("anchor_id,similar_id,dissimilar_id,regime\n"));
        assert!(text.contains("x,y,z,non_hierarchical\n"));
        assert_eq!(read_triplets_csv(text.as_bytes()).unwrap(), ts);
        assert_eq!(read_triplets_csv(triplets_to_csv(&[]).as_bytes()).unwrap(), vec![]);
        assert!(read_triplets_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}

//! The ablation variant grammar: tokens like `-X`, `+X-Y` or `-X-Y+G`
//! select stream aggregation signs and gating.
//!
//! `±X` sets the input-stream sign and is mandatory. `±Y` sets the
//! output-stream sign; without it the output stream is disabled and the
//! prediction is read from the input stream alone. `+G` re-enables the
//! gates (they are off by default in ablation variants so the signs are
//! compared in isolation).

use deepboots::backbone::{Aggregation, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub input_agg: Aggregation,
    pub output_agg: Option<Aggregation>,
    pub gating: bool,
}

fn sign(c: char) -> Option<Aggregation> {
    match c {
        '+' => Some(Aggregation::Add),
        '-' | '\u{2212}' => Some(Aggregation::Subtract),
        _ => None,
    }
}

pub fn parse_variant(token: &str) -> Result<Variant, String> {
    let chars: Vec<char> = token.trim().chars().collect();
    let mut input_agg = None;
    let mut output_agg = None;
    let mut gating = false;
    let mut i = 0;
    while i < chars.len() {
        let s = sign(chars[i])
            .ok_or_else(|| format!("bad variant token {token:?}: expected + or - before a stream letter"))?;
        let letter = chars
            .get(i + 1)
            .ok_or_else(|| format!("bad variant token {token:?}: dangling sign"))?;
        match letter {
            'X' | 'x' if input_agg.is_none() => input_agg = Some(s),
            'Y' | 'y' if output_agg.is_none() => output_agg = Some(s),
            'G' | 'g' => {
                if s != Aggregation::Add {
                    return Err(format!("bad variant token {token:?}: gating is +G only"));
                }
                gating = true;
            }
            _ => return Err(format!("bad variant token {token:?}: unexpected {letter:?}")),
        }
        i += 2;
    }
    let input_agg =
        input_agg.ok_or_else(|| format!("bad variant token {token:?}: missing ±X component"))?;
    Ok(Variant {
        input_agg,
        output_agg,
        gating,
    })
}

pub fn parse_variant_list(list: &str) -> Result<Vec<(String, Variant)>, String> {
    list.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| parse_variant(t).map(|v| (t.to_string(), v)))
        .collect()
}

impl Variant {
    pub fn apply(&self, config: &mut ModelConfig) {
        config.input_agg = self.input_agg;
        config.gating = self.gating;
        match self.output_agg {
            Some(agg) => {
                config.output_agg = agg;
                config.use_output_stream = true;
            }
            None => config.use_output_stream = false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_grammar() {
        let v = parse_variant("-X-Y+G").unwrap();
        assert_eq!(v.input_agg, Aggregation::Subtract);
        assert_eq!(v.output_agg, Some(Aggregation::Subtract));
        assert!(v.gating);

        let v = parse_variant("+X-Y").unwrap();
        assert_eq!(v.input_agg, Aggregation::Add);
        assert_eq!(v.output_agg, Some(Aggregation::Subtract));
        assert!(!v.gating);

        let v = parse_variant("-X").unwrap();
        assert_eq!(v.output_agg, None);
        assert!(!v.gating);

        // The Unicode minus used in figures is accepted too.
        assert!(parse_variant("\u{2212}X\u{2212}Y").is_ok());
    }

    #[test]
    fn rejects_malformed_tokens() {
        for bad in ["XY", "X", "-Y", "+G", "-X-X", "-X*Y", "-X-"] {
            assert!(parse_variant(bad).is_err(), "{bad} should be rejected");
        }
    }

    #[test]
    fn list_parsing_keeps_labels() {
        let vs = parse_variant_list("-X-Y, +X+Y").unwrap();
        assert_eq!(vs.len(), 2);
        assert_eq!(vs[0].0, "-X-Y");
    }
}

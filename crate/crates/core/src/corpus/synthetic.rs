//! Templated five-sentence stories.
//!
//! A grammar lists protagonists and activities. Each activity has opening
//! sentences and complications; each complication has setup sentences,
//! development sentences and resolution pairs `(step, ending)`. A story is
//!
//! ```text
//! opening · setup · development · step · ending
//! ```
//!
//! with all sentences drawn from one activity and complication. With
//! probability `coupling` the step is the partner of the chosen ending,
//! otherwise it comes from a random resolution of the same complication, so
//! the ending carries information about the interior that a left-only reader
//! cannot recover.
//!
//! Grammar files are line oriented: `key: value`, `#` comments, blank lines
//! ignored. Keys attach to the most recent `activity` / `complication`.
//!
//! ```text
//! coupling: 0.9
//! protagonists: Jim | Sarah
//! activity: hiking
//! opening: {P} went hiking alone at the state park.
//! complication: lost
//! setup: {P} got lost on a trail.
//! develop: {P} lost the map.
//! resolve: {P} called for help. => {P} was rescued.
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::Rng as _;

use super::Story;
use crate::error::{CoreError, Result};

/// The grammar shipped with the crate.
pub const DEFAULT_GRAMMAR: &str = include_str!("../../data/stories.grammar");

const PROTAGONIST_SLOT: &str = "{P}";

#[derive(Debug, Clone, PartialEq)]
pub struct Complication {
    pub name: String,
    pub setups: Vec<String>,
    pub developments: Vec<String>,
    pub resolutions: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Activity {
    pub name: String,
    pub openings: Vec<String>,
    pub complications: Vec<Complication>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoryGrammar {
    /// Probability that the fourth sentence is the ending's own partner.
    pub coupling: f64,
    pub protagonists: Vec<String>,
    pub activities: Vec<Activity>,
}

impl StoryGrammar {
    pub fn parse(text: &str) -> Result<StoryGrammar> {
        let mut coupling = 0.9;
        let mut protagonists = Vec::new();
        let mut activities: Vec<Activity> = Vec::new();
        let mut last_line = 0;

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            last_line = line_no;
            let err = |message: String| CoreError::Parse { line: line_no, message };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once(':').ok_or_else(|| err("expected `key: value`".into()))?;
            let value = value.trim();
            if value.is_empty() {
                return Err(err(format!("empty value for `{}`", key.trim())));
            }
            let current_activity = activities.last_mut();
            match key.trim() {
                "coupling" => {
                    coupling = value.parse::<f64>().map_err(|_| err(format!("bad coupling {value:?}")))?;
                    if !(0.0..=1.0).contains(&coupling) {
                        return Err(err("coupling must lie in [0, 1]".into()));
                    }
                }
                "protagonists" => {
                    protagonists.extend(value.split('|').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()));
                }
                "activity" => activities.push(Activity {
                    name: value.into(),
                    openings: Vec::new(),
                    complications: Vec::new(),
                }),
                "opening" => current_activity
                    .ok_or_else(|| err("`opening` before any `activity`".into()))?
                    .openings
                    .push(value.into()),
                "complication" => current_activity
                    .ok_or_else(|| err("`complication` before any `activity`".into()))?
                    .complications
                    .push(Complication {
                        name: value.into(),
                        setups: Vec::new(),
                        developments: Vec::new(),
                        resolutions: Vec::new(),
                    }),
                key @ ("setup" | "develop" | "resolve") => {
                    let comp = current_activity
                        .and_then(|a| a.complications.last_mut())
                        .ok_or_else(|| err(format!("`{key}` before any `complication`")))?;
                    match key {
                        "setup" => comp.setups.push(value.into()),
                        "develop" => comp.developments.push(value.into()),
                        _ => {
                            let (step, ending) =
                                value.split_once("=>").ok_or_else(|| err("resolve needs `step => ending`".into()))?;
                            let (step, ending) = (step.trim(), ending.trim());
                            if step.is_empty() || ending.is_empty() {
                                return Err(err("resolve sides must be non-empty".into()));
                            }
                            comp.resolutions.push((step.into(), ending.into()));
                        }
                    }
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }

        let at_end = |message: String| CoreError::Parse { line: last_line, message };
        if protagonists.is_empty() {
            return Err(at_end("no protagonists declared".into()));
        }
        if activities.is_empty() {
            return Err(at_end("no activities declared".into()));
        }
        for a in &activities {
            if a.openings.is_empty() || a.complications.is_empty() {
                return Err(at_end(format!("activity `{}` needs openings and complications", a.name)));
            }
            for c in &a.complications {
                if c.setups.is_empty() || c.developments.is_empty() || c.resolutions.is_empty() {
                    return Err(at_end(format!(
                        "complication `{}` needs setup, develop and resolve lines",
                        c.name
                    )));
                }
            }
        }
        Ok(StoryGrammar { coupling, protagonists, activities })
    }

    pub fn generate(&self, n: usize, seed: u64) -> Vec<Story> {
        let mut rng = crate::seeded_rng(seed);
        (0..n)
            .map(|i| {
                let who = self.protagonists.choose(&mut rng).expect("validated non-empty");
                let activity = self.activities.choose(&mut rng).expect("validated non-empty");
                let opening = activity.openings.choose(&mut rng).expect("validated non-empty");
                let comp = activity.complications.choose(&mut rng).expect("validated non-empty");
                let setup = comp.setups.choose(&mut rng).expect("validated non-empty");
                let develop = comp.developments.choose(&mut rng).expect("validated non-empty");
                let (partner, ending) = comp.resolutions.choose(&mut rng).expect("validated non-empty");
                let step = if rng.random_bool(self.coupling) {
                    partner
                } else {
                    &comp.resolutions.choose(&mut rng).expect("validated non-empty").0
                };
                let sentences = [opening, setup, develop, step, ending]
                    .iter()
                    .map(|t| t.replace(PROTAGONIST_SLOT, who))
                    .collect();
                Story::from_generated(format!("syn-{i:05}"), sentences)
            })
            .collect()
    }
}

/// Parses `grammar` and samples `n` five-sentence stories.
pub fn generate_synthetic_corpus(grammar: &str, n: usize, seed: u64) -> Result<Vec<Story>> {
    Ok(StoryGrammar::parse(grammar)?.generate(n, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
# tiny grammar
coupling: 1.0
protagonists: Ann | Bo
activity: baking
opening: {P} baked bread.
complication: burnt
setup: The oven was too hot.
develop: Smoke filled the kitchen.
resolve: {P} opened a window. => {P} tried again.
resolve: {P} called a friend. => {P} bought bread instead.
";

    #[test]
    fn parses_and_generates_five_sentence_stories() {
        let g = StoryGrammar::parse(SMALL).unwrap();
        assert_eq!(g.protagonists, ["Ann", "Bo"]);
        assert_eq!(g.activities[0].complications[0].resolutions.len(), 2);
        let stories = g.generate(50, 1);
        assert_eq!(stories.len(), 50);
        for s in &stories {
            assert_eq!(s.len(), 5);
            assert!(!s.sentences().iter().any(|x| x.contains("{P}")));
            // coupling 1.0: step and ending always partner
            let partner = match s.ending() {
                e if e.ends_with("tried again.") => "opened a window.",
                _ => "called a friend.",
            };
            assert!(s.sentences()[3].ends_with(partner));
        }
        assert!(g.generate(0, 1).is_empty());
        assert_eq!(g.generate(20, 9), g.generate(20, 9));
    }

    #[test]
    fn default_grammar_parses() {
        let g = StoryGrammar::parse(DEFAULT_GRAMMAR).unwrap();
        assert!(g.coupling > 0.5);
        let stories = g.generate(100, 7);
        assert!(stories.iter().all(|s| s.len() == 5 && s.sentences().iter().all(|x| !x.trim().is_empty())));
    }

    #[test]
    fn malformed_grammar_reports_line() {
        let bad = "protagonists: A\nactivity: x\nopening: hi\nsetup: orphan\n";
        assert_eq!(
            StoryGrammar::parse(bad).unwrap_err(),
            CoreError::Parse { line: 4, message: "`setup` before any `complication`".into() }
        );
        assert!(matches!(StoryGrammar::parse("nonsense line"), Err(CoreError::Parse { line: 1, .. })));
        assert!(matches!(
            StoryGrammar::parse("protagonists: A\nactivity: x\nopening: o\ncomplication: c\nsetup: s\ndevelop: d\nresolve: no arrow"),
            Err(CoreError::Parse { line: 7, .. })
        ));
        assert!(StoryGrammar::parse("coupling: 2\n").is_err());
        assert!(StoryGrammar::parse("protagonists: A\n").is_err());
    }
}

//! Stage prompt templates, shipped as text assets.
//!
//! Slots are `{prompt}`, `{critique}`, `{fb}` and `{mis_pairs}`. The
//! `{base64_combined_image}` slot is left in place: the image travels in the
//! request's `image_b64` field.

pub const CRITIC: &str = include_str!("../../assets/templates/critic.txt");
/// Two-step chain: instructions from a critic's critique.
pub const INSTRUCT_FROM_CRITIQUE: &str = include_str!("../../assets/templates/instruct_from_critique.txt");
/// Instructions from (concept, flag) misalignment pairs.
pub const INSTRUCT_FROM_PAIRS: &str = include_str!("../../assets/templates/instruct_from_pairs.txt");
/// One-step chain: instructions straight from the image and prompt.
pub const DIRECT_INSTRUCTIONS: &str = include_str!("../../assets/templates/direct_instructions.txt");
pub const FEEDBACK_TO_INSTRUCTIONS: &str = include_str!("../../assets/templates/feedback_to_instructions.txt");
pub const RICH_FEEDBACK_TO_INSTRUCTIONS: &str = include_str!("../../assets/templates/rich_feedback_to_instructions.txt");
pub const FEEDBACK_THEN_INSTRUCTIONS: &str = include_str!("../../assets/templates/feedback_then_instructions.txt");

pub const SLOTS: [&str; 4] = ["prompt", "critique", "fb", "mis_pairs"];

/// Values for the template slots; unset slots stay verbatim.
#[derive(Debug, Clone, Default)]
pub struct Slots<'a> {
    pub prompt: Option<&'a str>,
    pub critique: Option<&'a str>,
    pub fb: Option<&'a str>,
    pub mis_pairs: Option<&'a str>,
}

/// Substitutes slots in a single left-to-right pass, so slot-like text inside
/// substituted values is never expanded.
pub fn render(template: &str, slots: &Slots<'_>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let value = after.find('}').and_then(|close| {
            let v = match &after[..close] {
                "prompt" => slots.prompt,
                "critique" => slots.critique,
                "fb" => slots.fb,
                "mis_pairs" => slots.mis_pairs,
                _ => None,
            };
            v.map(|v| (v, close))
        });
        match value {
            Some((v, close)) => {
                out.push_str(v);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn render_critic(prompt: &str) -> String {
    render(CRITIC, &Slots { prompt: Some(prompt), ..Default::default() })
}

pub fn render_instruct(prompt: &str, critique: Option<&str>) -> String {
    match critique {
        Some(c) => render(
            INSTRUCT_FROM_CRITIQUE,
            &Slots {
                prompt: Some(prompt),
                critique: Some(c),
                ..Default::default()
            },
        ),
        None => render(DIRECT_INSTRUCTIONS, &Slots { prompt: Some(prompt), ..Default::default() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn critic_prompt_appears_once() {
        let r = render_critic("a red fox {critique}");
        assert_eq!(r.matches("a red fox {critique}").count(), 1);
        assert!(r.contains("[a red fox {critique}]"));
        assert!(r.starts_with("You are a visual-language critic."));
    }

    #[test]
    fn two_step_fills_both_slots() {
        let r = render_instruct("p", Some("too dark"));
        assert!(r.contains("this prompt: p."));
        assert!(r.contains("Critique: too dark."));
        assert!(r.contains("{base64_combined_image}"));
        assert!(!r.contains("{prompt}") && !r.contains("{critique}"));
    }

    #[test]
    fn every_template_uses_known_slots() {
        for t in [
            CRITIC,
            INSTRUCT_FROM_CRITIQUE,
            INSTRUCT_FROM_PAIRS,
            DIRECT_INSTRUCTIONS,
            FEEDBACK_TO_INSTRUCTIONS,
            RICH_FEEDBACK_TO_INSTRUCTIONS,
            FEEDBACK_THEN_INSTRUCTIONS,
        ] {
            assert!(t.contains("{prompt}"));
            let all = Slots {
                prompt: Some("P"),
                critique: Some("C"),
                fb: Some("F"),
                mis_pairs: Some("M"),
            };
            let r = render(t, &all);
            for s in SLOTS {
                assert!(!r.contains(&format!("{{{s}}}")));
            }
        }
    }
}

//! Named context-distillation instruction presets.
//!
//! Each preset is the default distillation prompt for one corpus family.
//! [`resolve`] accepts either a preset name or free instruction text, so
//! configs can say `instruction = "musique"` or spell out their own prompt.

/// (name, instruction text) pairs, in preset-name order.
pub const PRESETS: &[(&str, &str)] = &[
    (
        "bookhis",
        "Summarize the above co-purchased or co-viewed history books of the target book \
         into a contextual representation that highlights dominant geographical regions, \
         historical periods, and recurring themes. Use this distilled context, together \
         with the original books as supporting evidence, when encoding the following \
         target book for category classification: ",
    ),
    (
        "citation",
        "Summarize the above citing and cited research papers of the target paper into a \
         contextual representation that captures shared domains, recurring methods, and \
         notable overlaps. Use this distilled context, together with the original papers \
         as supporting evidence, when encoding the following target paper for domain \
         classification: ",
    ),
    (
        "hotpotqa",
        "Summarize the above linked Wikipedia paragraphs of the target paragraph into a \
         contextual representation that captures shared entities, relations, and \
         background knowledge. Use this distilled context, together with the original \
         paragraphs as supporting evidence, when encoding the following target paragraph \
         for retrieval: ",
    ),
    (
        "musique",
        "Summarize the above linked Wikipedia paragraphs of the target paragraph into a \
         contextual representation that captures shared entities, relations, and \
         background knowledge. Use this distilled context, together with the original \
         paragraphs as supporting evidence, when encoding the following target paragraph \
         for retrieval: ",
    ),
    (
        "sportsfit",
        "Summarize the above co-purchased or co-viewed sports & fitness items of the \
         target item into a contextual representation that captures activity types, \
         training goals, and usage contexts. Use this distilled context, together with \
         the original items as supporting evidence, when encoding the following target \
         item for category classification: ",
    ),
    (
        "stackexchange",
        "Summarize the above related StackExchange post titles of the target post into a \
         contextual representation that captures overlapping topics, recurring tags, and \
         shared problem domains. Use this distilled context, together with the original \
         posts as supporting evidence, when encoding the following target post for \
         clustering: ",
    ),
    (
        "stark",
        "Summarize the above co-purchased or co-viewed products, brands, colors, and \
         categories of the target product into a contextual representation that captures \
         complementary functions, styles, and usage contexts. Use this distilled context, \
         together with the original attributes as supporting evidence, when encoding the \
         following target product for recommendation: ",
    ),
];

/// Look up a preset by name.
pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

/// Resolve an instruction spec: preset name if it matches, verbatim otherwise.
pub fn resolve(spec: &str) -> String {
    preset(spec).unwrap_or(spec).to_string()
}

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_resolve() {
        for name in [
            "musique",
            "hotpotqa",
            "citation",
            "bookhis",
            "sportsfit",
            "stark",
            "stackexchange",
        ] {
            let text = preset(name).unwrap();
            assert!(text.starts_with("Summarize the above"));
            assert!(text.ends_with(": "));
        }
    }

    #[test]
    fn unknown_spec_passes_through() {
        assert_eq!(resolve("custom prompt"), "custom prompt");
        assert_eq!(resolve("musique"), preset("musique").unwrap());
    }
}

//! Finds the workload ids a query touches without evaluating it.

use std::collections::BTreeSet;

use wattline_core::selector::{find_selectors, MatchOp, SelectorError, METRIC_NAME_LABEL};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QueryInspection {
    pub raw_query: String,
    /// Values bound to the id label by `=` matchers.
    pub workload_ids: BTreeSet<String>,
    /// Metric names fixed by a bare name or a `__name__="..."` matcher.
    pub metric_names: BTreeSet<String>,
    /// Metric names of selectors without an id matcher; `None` when the
    /// selector does not pin a single name.
    pub selectors_without_id: Vec<Option<String>>,
    /// A regex or negative matcher on the id label was seen.
    pub non_verifiable: bool,
}

pub fn extract_workload_ids(query: &str, id_label: &str) -> Result<QueryInspection, SelectorError> {
    let mut out = QueryInspection {
        raw_query: query.to_string(),
        ..Default::default()
    };
    for sel in find_selectors(query)? {
        let name = sel.metric.clone().or_else(|| {
            sel.matchers_for(METRIC_NAME_LABEL)
                .find(|m| m.op == MatchOp::Equal)
                .map(|m| m.value.clone())
        });
        if let Some(n) = &name {
            out.metric_names.insert(n.clone());
        }
        let mut has_id = false;
        for m in sel.matchers_for(id_label) {
            has_id = true;
            match m.op {
                MatchOp::Equal => {
                    out.workload_ids.insert(m.value.clone());
                }
                _ => out.non_verifiable = true,
            }
        }
        if !has_id {
            out.selectors_without_id.push(name);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(q: &str) -> Vec<String> {
        extract_workload_ids(q, "uuid")
            .unwrap()
            .workload_ids
            .into_iter()
            .collect()
    }

    #[test]
    fn single_selector() {
        assert_eq!(ids(r#"cpu_usage{uuid="123"}"#), ["123"]);
    }

    #[test]
    fn union_of_selectors() {
        assert_eq!(ids(r#"a{uuid="1"} + b{uuid="2"}"#), ["1", "2"]);
        assert_eq!(
            ids(r#"sum by (uuid) (rate(a{uuid="1"}[5m])) / on(uuid) b{uuid="1"}"#),
            ["1"]
        );
    }

    #[test]
    fn selector_without_id_is_recorded() {
        let i = extract_workload_ids(r#"up{job="node"}"#, "uuid").unwrap();
        assert!(i.workload_ids.is_empty());
        assert_eq!(i.selectors_without_id, vec![Some("up".to_string())]);
        assert!(!i.non_verifiable);
    }

    #[test]
    fn regex_and_negative_matchers_are_non_verifiable() {
        for q in [
            r#"a{uuid=~"1|2"}"#,
            r#"a{uuid!="1"}"#,
            r#"a{uuid!~"1"}"#,
            r#"a{uuid="1", uuid=~".*"}"#,
        ] {
            assert!(extract_workload_ids(q, "uuid").unwrap().non_verifiable, "{q}");
        }
    }

    #[test]
    fn name_matcher_counts_as_metric_name() {
        let i = extract_workload_ids(r#"{__name__="x", uuid="9"}"#, "uuid").unwrap();
        assert_eq!(i.metric_names.into_iter().collect::<Vec<_>>(), ["x"]);
    }

    #[test]
    fn quoted_braces_and_escapes() {
        assert_eq!(ids(r#"a{note="}{", uuid="q\"1"}"#), ["q\"1"]);
    }

    #[test]
    fn unbalanced_input_is_an_error() {
        assert!(extract_workload_ids(r#"a{uuid="1""#, "uuid").is_err());
        assert!(extract_workload_ids(r#"a{uuid="1}"#, "uuid").is_err());
        assert!(extract_workload_ids("sum(a{uuid=\"1\"}", "uuid").is_err());
    }
}

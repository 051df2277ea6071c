use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Subtask;

pub const TEMPLATES_PER_SUBTASK: usize = 10;
pub const DESCRIPTION_SLOT: &str = "{description}";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("subtask {subtask}: expected {TEMPLATES_PER_SUBTASK} templates, found {found}")]
    Count { subtask: Subtask, found: usize },
    #[error("subtask {subtask}: template {index} has no {{description}} slot")]
    MissingSlot { subtask: Subtask, index: usize },
}

/// Ten instruction templates per subtask, each with a `{description}` slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstructionTemplateSet {
    templates: BTreeMap<Subtask, Vec<String>>,
}

impl InstructionTemplateSet {
    /// Builds and validates a set from explicit lists.
    pub fn new(templates: BTreeMap<Subtask, Vec<String>>) -> Result<Self, TemplateError> {
        let set = Self { templates };
        set.validate()?;
        Ok(set)
    }

    /// The stock web-navigation templates.
    pub fn builtin() -> Self {
        let templates = Subtask::ALL
            .iter()
            .zip(BUILTIN.iter())
            .map(|(s, list)| (*s, list.iter().map(|t| t.to_string()).collect()))
            .collect();
        Self { templates }
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for subtask in Subtask::ALL {
            let list = self.templates.get(&subtask).map(Vec::as_slice).unwrap_or(&[]);
            if list.len() != TEMPLATES_PER_SUBTASK {
                return Err(TemplateError::Count {
                    subtask,
                    found: list.len(),
                });
            }
            if let Some(index) = list.iter().position(|t| !t.contains(DESCRIPTION_SLOT)) {
                return Err(TemplateError::MissingSlot { subtask, index });
            }
        }
        Ok(())
    }

    pub fn templates(&self, subtask: Subtask) -> &[String] {
        self.templates.get(&subtask).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Substitutes `description` verbatim into template `index` of `subtask`.
    pub fn instantiate(&self, subtask: Subtask, index: usize, description: &str) -> String {
        self.templates(subtask)[index].replace(DESCRIPTION_SLOT, description)
    }
}

impl Default for InstructionTemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

#[rustfmt::skip]
const BUILTIN: [[&str; TEMPLATES_PER_SUBTASK]; 12] = [
    // PrefixToSuffix
    [
        "Determine the next web navigation trajectory using the task instruction \"{description}\" and the prior trajectory below.",
        "Retrieve the upcoming web navigation trajectory as specified by the task \"{description}\" and the previous trajectory provided.",
        "Search the next phase of the web navigation trajectory based on the user query \"{description}\" and the earlier trajectory.",
        "From the user input \"{description}\" and the past navigation steps, locate the subsequent navigation sequence for GUI agents.",
        "Apply the request \"{description}\" to the previous web navigation steps to derive the next trajectory.",
        "Represent the previous trajectory for web agents below to determine the next trajectory based on the task \"{description}\".",
        "According to the previous web agent trajectory below, identify the next sequence of steps to complete the user instruction \"{description}\".",
        "Based on the previous trajectory below, search the next interaction sequence of web agents for the user request \"{description}\".",
        "With the previous GUI navigation trajectory below as a guide, look for the next trajectory for the user intention \"{description}\".",
        "Given the goal \"{description}\" and the earlier navigation sequence from GUI agents, match the subsequent trajectory.",
    ],
    // SuffixToPrefix
    [
        "Find the previous web browsing trajectory based on the user input \"{description}\" and the current trajectory.",
        "Identify the former web navigation history by analyzing the user request \"{description}\" and the provided trajectory.",
        "With the instruction \"{description}\" and the following interaction sequence, extract the earlier trajectory for web agents.",
        "Determine the past trajectory using the goal \"{description}\" and the succeeding navigation sequence for GUI agents.",
        "Retrieve the preceding GUI navigation trajectory with the task description \"{description}\" and the succeeding trajectory below.",
        "Using the user query \"{description}\" and the succeeding navigation steps for web agents, locate the preceding interaction steps.",
        "Analyze the query \"{description}\" along with the provided web agent trajectory to derive the former navigation steps.",
        "Based on the request \"{description}\" and the later web interaction trajectory, look for the prior navigation sequence.",
        "Consider the task \"{description}\" together with the given trajectory to retrieve the prior web navigation trajectory.",
        "Represent the current trajectory for web agents below to determine the previous trajectory according to the task \"{description}\".",
    ],
    // PrefixToNextState
    [
        "Identify the upcoming state from the earlier web navigation trajectory below and the instruction \"{description}\".",
        "Extract the next state from the provided previous navigation sequence for web agents and the directive \"{description}\".",
        "Locate the following state from the given former web navigation trajectory and the task input \"{description}\".",
        "Determine the subsequent observation from the task \"{description}\" and the earlier web interaction trajectory.",
        "Find the next observation by considering the command \"{description}\" and the former GUI navigation trajectory.",
        "Using the user instruction \"{description}\" and the former web navigation trajectory, ascertain the subsequent state.",
        "Based on the former web interaction history provided and the user request \"{description}\", deduce the next state.",
        "Use the user intention \"{description}\" and the earlier navigation sequence for GUI agents to derive the following state.",
        "Find the next state based on the goal \"{description}\" and the earlier interaction history for web agents.",
        "Represent the given GUI navigation history to locate the upcoming state according to the user intention \"{description}\".",
    ],
    // SuffixToPrevState
    [
        "Find the antecedent state using the command \"{description}\" and the current web navigation trajectory.",
        "Identify the prior state by applying the directive \"{description}\" along with the present navigation trajectory for GUI agents.",
        "Locate the former observation using the instruction \"{description}\" and the upcoming web interaction trajectory.",
        "Ascertain the preceding observation based on the task input \"{description}\" and the provided web agent browsing sequence.",
        "Determine the previous state by employing the goal \"{description}\" along with the upcoming navigation trajectory for web agents.",
        "Find the antecedent state with the user instruction \"{description}\" and the succeeding GUI navigation trajectory.",
        "Retrieve the former observation given the request \"{description}\" and the upcoming web navigation history.",
        "Identify the prior state based on the task \"{description}\" and the succeeding web interaction trajectory.",
        "Represent the provided GUI navigation history to retrieve the previous state using the user query \"{description}\".",
        "Recognize the prior observation using the user task \"{description}\" and the given web navigation trajectory.",
    ],
    // QueryToGold
    [
        "Determine the complete web navigation trajectory based on the following instruction \"{description}\".",
        "Locate the equivalent web navigation trajectory derived from the following user input \"{description}\".",
        "Find the GUI navigation history aligning with the following goal \"{description}\".",
        "Match the corresponding trajectory for web agents using the following user query \"{description}\".",
        "Pinpoint the equivalent navigation trajectory for GUI agents with the following task \"{description}\".",
        "Ascertain the corresponding web interaction trajectory using the request \"{description}\".",
        "Identify the unique navigation trajectory for web agents according to the provided instruction \"{description}\".",
        "Determine the complete GUI navigation trajectory from the user task \"{description}\".",
        "Ascertain the unique GUI interaction history by considering the task \"{description}\".",
        "Locate the exactly equivalent web navigation trajectory based on the given query \"{description}\".",
    ],
    // QueryToSilver
    [
        "Determine the analogous web navigation trajectory based on the following directive \"{description}\".",
        "Identify the similar web navigation history using the task input \"{description}\".",
        "Locate the akin navigation sequence for GUI agents as dictated by the user input \"{description}\".",
        "Retrieve the similar web browsing trajectory as specified by the instruction \"{description}\".",
        "Identify the similar GUI interaction history based on the task description \"{description}\".",
        "Locate the analogous navigation trajectory for web agents using the instruction \"{description}\".",
        "Retrieve the analogous interaction history for GUI agents based on the provided command \"{description}\".",
        "Find a similar GUI navigation history following the task \"{description}\".",
        "Extract a similar web browsing trajectory based on the instruction \"{description}\".",
        "From the user query \"{description}\", match the similar web agent navigation trajectory.",
    ],
    // StateToNextState
    [
        "Retrieve the following web navigation state according to the instruction \"{description}\" and the prior state.",
        "Determine the subsequent web navigation observation given the task description \"{description}\" and the preceding state.",
        "Retrieve the upcoming observation for web navigation agents following the user input \"{description}\" and the previous state.",
        "Identify the next navigation state for GUI agents using the goal \"{description}\" and the preceding state.",
        "Using the provided instruction \"{description}\" and the former state, what is the next GUI navigation state?",
        "From the query \"{description}\" and the prior observation, derive the next state in the web navigation trajectory.",
        "Given the user input \"{description}\" together with the current state, find the next web navigation state.",
        "Taking the task input \"{description}\" and the former state, what is the subsequent GUI navigation state?",
        "Considering the directive \"{description}\" and the preceding observation, determine the next web navigation state.",
        "With the task \"{description}\" and the previous state from web agents as inputs, determine the subsequent state.",
    ],
    // StateToPrevState
    [
        "Retrieve the prior web navigation state using the task \"{description}\" along with the current state.",
        "In light of the instruction \"{description}\" and the current state provided, deduce the prior GUI navigation state.",
        "Based on the provided user input \"{description}\" and the current observation, find the prior navigation state for web agents.",
        "With the directive \"{description}\" and the current state, determine the prior web browsing state.",
        "Considering both the current web agent observation provided and the user intention \"{description}\", locate the prior navigation state.",
        "Given the present state and the goal \"{description}\", determine the previous GUI navigation state.",
        "Combine the task description \"{description}\" with the current state to identify the preceding navigation state for GUI agents.",
        "Taking the description \"{description}\" and the current state into account, search the previous web agent state.",
        "Utilize the user request \"{description}\" alongside the present state to extract the prior GUI navigation state.",
        "Use the directive \"{description}\" with the current state to look for the state directly preceding in the web agent navigation trajectory.",
    ],
    // StateToSuffix
    [
        "Find the subsequent web navigation trajectory based on the instruction \"{description}\" and the previous state.",
        "Based on the task \"{description}\" and the previous observation, identify the subsequent GUI navigation trajectory.",
        "Locate the next GUI navigation trajectory by applying the instruction \"{description}\" to the previous state.",
        "With the user input \"{description}\" and the previous state in hand, identify the next navigation trajectory for web agents.",
        "What is the following navigation trajectory for GUI agents when applying the user intention \"{description}\" to the previous state?",
        "Given the user goal \"{description}\" and the previous state, search the next web navigation trajectory.",
        "When given the user instruction \"{description}\" and the former state, what is the next trajectory for web navigation?",
        "Identify the next web navigation trajectory by merging the task \"{description}\" with the previous state.",
        "From the directive \"{description}\" and the prior state, look for the subsequent GUI navigation trajectory.",
        "Determine the subsequent browsing trajectory for web agents with the task \"{description}\" and the previous state as references.",
    ],
    // StateToPrefix
    [
        "Find the previous web navigation history based on the instruction \"{description}\" and the current state.",
        "Retrieve the preceding web navigation trajectory using the intention \"{description}\" along with the present state.",
        "From the instruction \"{description}\" and the present state, find the prior GUI navigation history.",
        "What does the previous navigation history for web agents look like when derived from the user input \"{description}\" and the current state?",
        "Locate the prior GUI navigation history by combining the description \"{description}\" with the current observation.",
        "Identify the web navigation trajectory preceding the current state according to the task \"{description}\".",
        "Derive the previous navigation trajectory for GUI agents by combining the instruction \"{description}\" with the current state.",
        "Search the browsing history for web agents that came before the provided current observation with regard to the user query \"{description}\".",
        "Based on the current state and the user intention \"{description}\", extract the trajectory that came before in the web navigation.",
        "Recognize the GUI navigation history that predates the current state by considering the user need \"{description}\".",
    ],
    // QueryToState
    [
        "Find the specific web navigation state corresponding to the description \"{description}\".",
        "Identify the equivalent web navigation state as defined by the description \"{description}\".",
        "Extract the GUI navigation observation that corresponds with \"{description}\".",
        "Locate the web navigation state as dictated by the description \"{description}\".",
        "Identify the navigation state for GUI agents that is equivalent to the details provided in \"{description}\".",
        "Search the observation for web navigation that best fits the details described in \"{description}\".",
        "Determine the precise GUI navigation observation that reflects the input \"{description}\".",
        "Retrieve the navigation observation for web agents that best aligns with the input \"{description}\".",
        "What is the corresponding web browsing state described by the input \"{description}\"?",
        "From the description \"{description}\", identify the specific navigation observation for GUI navigation.",
    ],
    // QueryToTerminalState
    [
        "Retrieve the last web navigation observation based on the task \"{description}\".",
        "From the task \"{description}\", locate the final state in the web navigation sequence.",
        "What is the ultimate web navigation state for the task instruction \"{description}\"?",
        "Find the end state in the GUI navigation as defined by the task \"{description}\".",
        "Determine the last state in the web browsing process for the task \"{description}\".",
        "Locate the final observation of the web navigation for the task \"{description}\".",
        "Identify the concluding status in the GUI agent trajectory for the task \"{description}\".",
        "Based on the task \"{description}\", extract the final navigation observation for web agents.",
        "What is the final GUI navigation status according to the task \"{description}\"?",
        "Search the terminal observation in the web navigation for the task instruction \"{description}\".",
    ],
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_set_is_valid() {
        let set = InstructionTemplateSet::builtin();
        set.validate().unwrap();
        for s in Subtask::ALL {
            assert_eq!(set.templates(s).len(), TEMPLATES_PER_SUBTASK);
        }
    }

    #[test]
    fn instantiation_matches_reference_query() {
        let set = InstructionTemplateSet::builtin();
        assert_eq!(
            set.instantiate(
                Subtask::PrefixToSuffix,
                4,
                "Creating a template on Trello in a new tab."
            ),
            "Apply the request \"Creating a template on Trello in a new tab.\" to the previous web navigation steps to derive the next trajectory."
        );
    }

    #[test]
    fn json_round_trip_and_validation_errors() {
        let set = InstructionTemplateSet::builtin();
        let json = serde_json::to_string(&set).unwrap();
        let back: InstructionTemplateSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);

        let mut map: BTreeMap<Subtask, Vec<String>> = Subtask::ALL
            .iter()
            .map(|s| (*s, set.templates(*s).to_vec()))
            .collect();
        map.get_mut(&Subtask::QueryToState).unwrap()[3] = "no slot".into();
        assert_eq!(
            InstructionTemplateSet::new(map.clone()).unwrap_err(),
            TemplateError::MissingSlot {
                subtask: Subtask::QueryToState,
                index: 3
            }
        );
        map.get_mut(&Subtask::QueryToState).unwrap().pop();
        assert!(matches!(
            InstructionTemplateSet::new(map).unwrap_err(),
            TemplateError::Count { found: 9, .. }
        ));
    }
}

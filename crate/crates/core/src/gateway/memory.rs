//! Dialogue memory: the ordered questioner/solver turn log carried through a
//! sample, with a token-budget truncation policy applied at render time.

use std::time::Instant;

use crate::corpus::count_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Questioner,
    Solver,
}

#[derive(Debug, Clone)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
    pub stage_tag: String,
    pub timestamp: Instant,
}

#[derive(Debug, Clone)]
pub struct DialogueMemory {
    turns: Vec<ChatTurn>,
    pub token_budget: usize,
}

impl DialogueMemory {
    pub fn new(token_budget: usize) -> Self {
        assert!(token_budget > 0);
        DialogueMemory { turns: Vec::new(), token_budget }
    }

    pub fn turns(&self) -> &[ChatTurn] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Appends one turn, enforcing questioner/solver alternation starting
    /// with the questioner.
    pub fn push(&mut self, role: Role, content: impl Into<String>, stage_tag: &str) {
        let content = content.into();
        assert!(!content.is_empty(), "turn content must be non-empty");
        let expected = if self.turns.len() % 2 == 0 { Role::Questioner } else { Role::Solver };
        assert_eq!(role, expected, "turns must alternate questioner/solver");
        self.turns.push(ChatTurn { role, content, stage_tag: stage_tag.to_string(), timestamp: Instant::now() });
    }

    /// Removes the most recent turn (failed exchanges roll back their
    /// questioner turn so alternation survives errors).
    pub(crate) fn pop(&mut self) {
        self.turns.pop();
    }

    /// Turns to send to the backend: oldest solver turns are dropped first
    /// when the budget would be exceeded, but the original source-code turn
    /// (index 0) is always retained.
    pub fn rendered(&self) -> Vec<&ChatTurn> {
        let mut included: Vec<usize> = (0..self.turns.len()).collect();
        let total = |idx: &[usize]| -> usize {
            idx.iter().map(|&i| count_tokens(&self.turns[i].content)).sum()
        };
        while total(&included) > self.token_budget && included.len() > 1 {
            // oldest droppable solver turn, else oldest non-pinned turn
            let victim = included
                .iter()
                .position(|&i| i != 0 && self.turns[i].role == Role::Solver)
                .or_else(|| included.iter().position(|&i| i != 0));
            match victim {
                Some(pos) => {
                    included.remove(pos);
                }
                None => break,
            }
        }
        included.into_iter().map(|i| &self.turns[i]).collect()
    }

    pub fn rendered_token_count(&self) -> usize {
        self.rendered().iter().map(|t| count_tokens(&t.content)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternation_enforced() {
        let mut m = DialogueMemory::new(1000);
        m.push(Role::Questioner, "q1", "s");
        m.push(Role::Solver, "s1", "s");
        m.push(Role::Questioner, "q2", "s");
        assert_eq!(m.len(), 3);
    }

    #[test]
    #[should_panic(expected = "alternate")]
    fn double_questioner_panics() {
        let mut m = DialogueMemory::new(1000);
        m.push(Role::Questioner, "q1", "s");
        m.push(Role::Questioner, "q2", "s");
    }

    #[test]
    fn truncation_drops_solver_turns_first_and_pins_first_turn() {
        let mut m = DialogueMemory::new(10);
        m.push(Role::Questioner, "source code here alpha beta", "s"); // 5 tokens
        m.push(Role::Solver, "one two three four five six", "s"); // 6 tokens
        m.push(Role::Questioner, "gamma delta", "s"); // 2 tokens
        m.push(Role::Solver, "epsilon zeta", "s"); // 2 tokens
        let rendered = m.rendered();
        assert!(m.rendered_token_count() <= 10);
        // first turn retained
        assert!(rendered.iter().any(|t| t.content.starts_with("source code")));
        // the big solver turn was the victim
        assert!(!rendered.iter().any(|t| t.content.starts_with("one two")));
    }
}

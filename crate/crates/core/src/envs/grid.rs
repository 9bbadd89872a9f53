use serde::{Deserialize, Serialize};

/// `(row, col)` grid coordinate.
pub type Cell = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "Up",
            Direction::Down => "Down",
            Direction::Left => "Left",
            Direction::Right => "Right",
        }
    }

    pub fn delta(self) -> (isize, isize) {
        match self {
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
        }
    }

    /// The two perpendicular directions, counter-clockwise first.
    pub fn perpendicular(self) -> [Direction; 2] {
        match self {
            Direction::Up => [Direction::Left, Direction::Right],
            Direction::Down => [Direction::Right, Direction::Left],
            Direction::Left => [Direction::Down, Direction::Up],
            Direction::Right => [Direction::Up, Direction::Down],
        }
    }

    /// Neighbour of `cell` inside a `rows x cols` grid.
    pub fn step(self, cell: Cell, rows: usize, cols: usize) -> Option<Cell> {
        let (dr, dc) = self.delta();
        let r = cell.0.checked_add_signed(dr)?;
        let c = cell.1.checked_add_signed(dc)?;
        (r < rows && c < cols).then_some((r, c))
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Extract the direction from the first `<answer>...</answer>` span.
/// Matching is case-insensitive and ignores surrounding whitespace.
pub fn parse_action(text: &str) -> Option<Direction> {
    let open = text.find("<answer>")?;
    let rest = &text[open + "<answer>".len()..];
    let close = rest.find("</answer>")?;
    match rest[..close].trim().to_ascii_lowercase().as_str() {
        "up" => Some(Direction::Up),
        "down" => Some(Direction::Down),
        "left" => Some(Direction::Left),
        "right" => Some(Direction::Right),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_answer_spans() {
        assert_eq!(parse_action("<answer>Up</answer>"), Some(Direction::Up));
        assert_eq!(parse_action("<think>x</think><answer> right </answer>"), Some(Direction::Right));
        assert_eq!(parse_action("<answer>LEFT</answer>"), Some(Direction::Left));
        assert_eq!(parse_action("<answer>Up"), None);
        assert_eq!(parse_action("Up"), None);
        assert_eq!(parse_action("<answer>Jump</answer>"), None);
    }

    #[test]
    fn step_respects_bounds() {
        assert_eq!(Direction::Up.step((0, 0), 3, 3), None);
        assert_eq!(Direction::Right.step((0, 2), 3, 3), None);
        assert_eq!(Direction::Down.step((0, 2), 3, 3), Some((1, 2)));
        for d in Direction::ALL {
            assert_eq!(d.opposite().opposite(), d);
            for p in d.perpendicular() {
                assert_ne!(p, d);
                assert_ne!(p, d.opposite());
            }
        }
    }
}

/// Fixed 12-color series palette. Every pair differs by at least 60 in some
/// channel, as does every color against the white background and black ink.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [128, 128, 0],
    [0, 0, 128],
    [128, 0, 0],
    [190, 60, 0],
];

pub const COLOR_NAMES: [&str; 12] =
    ["red", "green", "yellow", "blue", "orange", "purple", "cyan", "magenta", "olive", "navy", "maroon", "brown"];

pub const BACKGROUND: [u8; 3] = [255, 255, 255];
pub const INK: [u8; 3] = [0, 0, 0];

/// Largest per-channel difference.
pub fn channel_distance(a: [u8; 3], b: [u8; 3]) -> u8 {
    (0..3).map(|i| a[i].abs_diff(b[i])).max().unwrap_or(0)
}

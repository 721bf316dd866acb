/**
 * Keyboard-first review: the whole accept / advance / no-match loop works
 * without touching the mouse, because a deferral queue replaces hours of
 * manual mapping work and throughput is the point.
 */

export type Action =
  | { kind: "accept" }
  | { kind: "noMatch" }
  | { kind: "next" }
  | { kind: "prev" }
  | { kind: "pick"; index: number }
  | { kind: "search" };

export function shortcutFor(key: string, inInput: boolean): Action | null {
  if (inInput) {
    return null; // typing in the search box must never trigger decisions
  }
  switch (key) {
    case "a":
      return { kind: "accept" };
    case "x":
      return { kind: "noMatch" };
    case "j":
    case "ArrowDown":
      return { kind: "next" };
    case "k":
    case "ArrowUp":
      return { kind: "prev" };
    case "/":
      return { kind: "search" };
    default: {
      if (/^[1-9]$/.test(key)) {
        return { kind: "pick", index: Number(key) - 1 };
      }
      return null;
    }
  }
}

export const SHORTCUT_LEGEND = [
  ["a", "accept top candidate"],
  ["1-9", "choose the n-th candidate"],
  ["x", "no match"],
  ["j / k", "next / previous item"],
  ["/", "search the target schema"],
] as const;

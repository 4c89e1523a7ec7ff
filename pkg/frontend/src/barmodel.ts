/**
 * Feedback bar rows derived from a state push.
 *
 * The server computes every guidance number and its pass/fail verdict; the
 * bar model only arranges them for display. Green is the echoed `within`
 * flag, never recomputed here, so the bars cannot drift from the server's
 * tolerance rules (the drill depth check, for one, is one-sided).
 */
import type { Feedback, StatePush } from "./protocol";

export interface FeedbackBar {
  /** Metric key inside feedback.metrics, e.g. "position_error". */
  metric: string;
  /** Short label for the widget row. */
  label: string;
  /** Signed metric value (mm or deg). */
  value: number;
  /** Tolerance for the full-scale extent of the bar. */
  tolerance: number;
  /** Server verdict for this metric (within flag). */
  green: boolean;
  /** Which way the bar shifts: the sign of the value. */
  arrow: -1 | 0 | 1;
  unit: "mm" | "deg";
}

interface BarSpec {
  metric: string;
  label: string;
  flag: string;
  tolerance: string;
  unit: "mm" | "deg";
}

const BAR_LAYOUT: Record<string, BarSpec[]> = {
  cut: [
    { metric: "position_error", label: "position", flag: "position", tolerance: "cut_position", unit: "mm" },
    { metric: "orientation_error", label: "orientation", flag: "orientation", tolerance: "cut_orientation", unit: "deg" },
    { metric: "depth_error", label: "depth", flag: "depth", tolerance: "cut_depth", unit: "mm" },
  ],
  chainsaw: [
    { metric: "far_point_error", label: "far point", flag: "far_point", tolerance: "cut_position", unit: "mm" },
    { metric: "bottom_point_error", label: "bottom point", flag: "bottom_point", tolerance: "cut_position", unit: "mm" },
    { metric: "orientation_error", label: "orientation", flag: "orientation", tolerance: "cut_orientation", unit: "deg" },
  ],
  drill: [
    { metric: "angle_error", label: "angle", flag: "angle", tolerance: "drill_angle", unit: "deg" },
    { metric: "start_error", label: "start", flag: "start", tolerance: "drill_start", unit: "mm" },
    { metric: "depth_remaining", label: "depth left", flag: "depth", tolerance: "drill_depth", unit: "mm" },
  ],
};

function barsFromFeedback(
  feedback: Feedback,
  tolerances: Record<string, number>,
): FeedbackBar[] {
  if (feedback.kind === null) {
    return [];
  }
  const layout = BAR_LAYOUT[feedback.kind] ?? [];
  const within = feedback.metrics.within ?? {};
  const bars: FeedbackBar[] = [];
  for (const spec of layout) {
    const value = feedback.metrics[spec.metric];
    if (typeof value !== "number") {
      continue;
    }
    bars.push({
      metric: spec.metric,
      label: spec.label,
      value,
      tolerance: tolerances[spec.tolerance] ?? 0,
      green: within[spec.flag] === true,
      arrow: Math.sign(value) as -1 | 0 | 1,
      unit: spec.unit,
    });
  }
  return bars;
}

/** Bar rows for the current push; empty when there is nothing to guide. */
export function feedbackBars(push: StatePush): FeedbackBar[] {
  if (push.feedback === null) {
    return [];
  }
  return barsFromFeedback(push.feedback, push.tolerances);
}

/** The server's overall verdict; false when no guidance is active. */
export function allGreen(push: StatePush): boolean {
  return push.feedback?.metrics.all_green === true;
}

/** Numeric readout next to each bar, e.g. "-1.25 mm". */
export function formatReadout(bar: FeedbackBar): string {
  return `${bar.value.toFixed(2)} ${bar.unit}`;
}

/**
 * Normalized shift of the bar marker in [-1, 1]: the value clipped to one
 * tolerance each way. A bar pegged at an edge is out of scale.
 */
export function barOffset(bar: FeedbackBar): number {
  if (bar.tolerance <= 0) {
    return Math.sign(bar.value);
  }
  return Math.max(-1, Math.min(1, bar.value / bar.tolerance));
}

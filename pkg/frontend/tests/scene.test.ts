/**
 * Scene graph behavior without a GL context: overlay construction from
 * pushed geometry, state coloring, glyph placement, and the blanked
 * overlay on localization failure.
 */
import * as THREE from "three";
import { describe, expect, it } from "vitest";
import { GuidanceScene, poseToMatrix } from "../src/scene";
import { capturedPush } from "./fixtures";

describe("pose payload conversion", () => {
  it("treats q as [w,x,y,z]", () => {
    const half = Math.SQRT1_2;
    // 90 degrees about +x carries +y onto +z.
    const matrix = poseToMatrix({ q: [half, half, 0, 0], t: [1, 2, 3] });
    const moved = new THREE.Vector3(0, 1, 0).applyMatrix4(matrix);
    expect(moved.x).toBeCloseTo(1, 10);
    expect(moved.y).toBeCloseTo(2, 10);
    expect(moved.z).toBeCloseTo(4, 10);
  });
});

describe("guidance scene", () => {
  it("builds the overlay from pushed geometry", () => {
    const scene = new GuidanceScene();
    expect(scene.overlay.visible).toBe(false);

    scene.update(capturedPush("push_registering.json"));
    expect(scene.overlay.visible).toBe(true);
    const names = scene.overlay.children.map((c) => c.name);
    expect(names).toContain("beam");
    expect(names).toContain("lap1_seat");
    expect(names).toContain("lap1_shoulder");
    expect(names).toContain("peg1");
  });

  it("highlights the selected hole and recolors done components", () => {
    const scene = new GuidanceScene();
    const push = capturedPush("push_drill_green.json");
    scene.update(push);
    const selectedColor = scene.componentColor("peg1");
    const pendingColor = scene.componentColor("lap1_seat");
    expect(selectedColor).not.toBeNull();
    expect(selectedColor).not.toBe(pendingColor);

    const after = structuredClone(push);
    after.selected = null;
    after.components.peg1 = "done";
    scene.update(after);
    expect(scene.componentColor("peg1")).not.toBe(selectedColor);
    expect(scene.componentColor("peg1")).not.toBe(pendingColor);
  });

  it("highlights every face of a selected joint", () => {
    const scene = new GuidanceScene();
    const push = capturedPush("push_cut.json");
    expect(push.selected).toBe("lap1");
    scene.update(push);
    expect(scene.componentColor("lap1_seat")).toBe(
      scene.componentColor("lap1_shoulder"),
    );
    expect(scene.componentColor("lap1_seat")).not.toBe(
      scene.componentColor("peg1"),
    );
  });

  it("places the tool and camera glyphs from the push", () => {
    const scene = new GuidanceScene();
    const push = capturedPush("push_drill_green.json");
    scene.update(push);
    expect(scene.toolGlyph.visible).toBe(true);
    expect(scene.cameraGlyph.visible).toBe(true);
    const t = push.tool_placement!.t;
    expect(scene.toolGlyph.position.x).toBeCloseTo(t[0], 10);
    expect(scene.toolGlyph.position.y).toBeCloseTo(t[1], 10);
    expect(scene.toolGlyph.position.z).toBeCloseTo(t[2], 10);
    const c = push.camera!.t;
    expect(scene.cameraGlyph.position.x).toBeCloseTo(c[0], 10);
  });

  it("blanks the overlay and glyphs when localization fails", () => {
    const scene = new GuidanceScene();
    scene.update(capturedPush("push_drill_green.json"));
    expect(scene.overlay.visible).toBe(true);

    const lost = structuredClone(capturedPush("push_drill_green.json"));
    lost.localization = "too few tags";
    scene.update(lost);
    expect(scene.overlay.visible).toBe(false);
    expect(scene.toolGlyph.visible).toBe(false);
    expect(scene.cameraGlyph.visible).toBe(false);

    scene.update(null);
    expect(scene.overlay.visible).toBe(false);
  });
});

/**
 * Three.js scene graph for the live view.
 *
 * Everything here renders from the latest snapshot: beam wireframe, cut
 * and hole overlay with the selected component highlighted, a glyph at the
 * tracked tool placement, and one at the camera. Construction needs no GL
 * context, so tests can drive update() headless and inspect the graph;
 * main.ts attaches the renderer.
 *
 * When the snapshot reports a localization failure the model overlay and
 * glyphs are hidden; the banner text comes from the view-state helpers.
 */
import * as THREE from "three";
import type { Geometry, PosePayload, StatePush } from "./protocol";

const STATE_COLORS: Record<string, number> = {
  pending: 0x8899aa,
  current: 0xffaa33,
  done: 0x44cc66,
};
const HIGHLIGHT = 0x33bbff;
const BEAM_COLOR = 0xccbb99;

/** Box wireframe edge list for corners ordered by (x,y,z) sign bits. */
const BOX_EDGES = [
  [0, 1], [2, 3], [4, 5], [6, 7],
  [0, 2], [1, 3], [4, 6], [5, 7],
  [0, 4], [1, 5], [2, 6], [3, 7],
];

export function poseToMatrix(pose: PosePayload): THREE.Matrix4 {
  const [w, x, y, z] = pose.q;
  const quat = new THREE.Quaternion(x, y, z, w);
  const matrix = new THREE.Matrix4();
  matrix.compose(
    new THREE.Vector3(pose.t[0], pose.t[1], pose.t[2]),
    quat,
    new THREE.Vector3(1, 1, 1),
  );
  return matrix;
}

function disposeChildren(group: THREE.Group): void {
  for (const child of [...group.children]) {
    group.remove(child);
    child.traverse((node) => {
      const mesh = node as THREE.Mesh;
      if (mesh.geometry) {
        mesh.geometry.dispose();
      }
      const material = mesh.material as THREE.Material | undefined;
      if (material) {
        material.dispose();
      }
    });
  }
}

function axesGlyph(size: number): THREE.Group {
  const group = new THREE.Group();
  group.add(new THREE.AxesHelper(size));
  const marker = new THREE.Mesh(
    new THREE.SphereGeometry(size * 0.15, 8, 6),
    new THREE.MeshBasicMaterial({ color: 0xffffff, wireframe: true }),
  );
  group.add(marker);
  return group;
}

export class GuidanceScene {
  readonly root = new THREE.Group();
  /** Beam box plus component meshes; hidden while localization is lost. */
  readonly overlay = new THREE.Group();
  readonly toolGlyph = axesGlyph(0.08);
  readonly cameraGlyph = axesGlyph(0.05);
  private componentNodes = new Map<string, THREE.Mesh | THREE.Line>();
  private lastGeometryTag = "";

  constructor() {
    this.root.add(this.overlay);
    this.root.add(this.toolGlyph);
    this.root.add(this.cameraGlyph);
    this.overlay.visible = false;
    this.toolGlyph.visible = false;
    this.cameraGlyph.visible = false;
  }

  update(push: StatePush | null): void {
    if (push === null) {
      this.overlay.visible = false;
      this.toolGlyph.visible = false;
      this.cameraGlyph.visible = false;
      return;
    }
    const located = push.localization === "ok";
    if (push.geometry !== null) {
      this.rebuildIfChanged(push.geometry);
      this.recolor(push);
    }
    this.overlay.visible = push.geometry !== null && located;

    if (push.tool_placement !== null && located) {
      this.toolGlyph.visible = true;
      poseToMatrix(push.tool_placement).decompose(
        this.toolGlyph.position,
        this.toolGlyph.quaternion,
        this.toolGlyph.scale,
      );
    } else {
      this.toolGlyph.visible = false;
    }
    if (push.camera !== null && located) {
      this.cameraGlyph.visible = true;
      poseToMatrix(push.camera).decompose(
        this.cameraGlyph.position,
        this.cameraGlyph.quaternion,
        this.cameraGlyph.scale,
      );
    } else {
      this.cameraGlyph.visible = false;
    }
  }

  componentColor(componentId: string): number | null {
    const node = this.componentNodes.get(componentId);
    if (node === undefined) {
      return null;
    }
    const material = node.material as
      | THREE.MeshBasicMaterial
      | THREE.LineBasicMaterial;
    return material.color.getHex();
  }

  /**
   * The overlay tracks the live registration, so candidate cycling and
   * sliding move every vertex. Rebuilding on any coordinate change keeps
   * the code one honest path instead of a partial-update scheme.
   */
  private rebuildIfChanged(geometry: Geometry): void {
    const tag = JSON.stringify(geometry.corners);
    if (
      tag === this.lastGeometryTag &&
      this.componentNodes.size > 0
    ) {
      return;
    }
    this.lastGeometryTag = tag;
    disposeChildren(this.overlay);
    this.componentNodes.clear();

    const beamPoints: THREE.Vector3[] = [];
    for (const [a, b] of BOX_EDGES) {
      const pa = geometry.corners[a!]!;
      const pb = geometry.corners[b!]!;
      beamPoints.push(new THREE.Vector3(...pa), new THREE.Vector3(...pb));
    }
    const beam = new THREE.LineSegments(
      new THREE.BufferGeometry().setFromPoints(beamPoints),
      new THREE.LineBasicMaterial({ color: BEAM_COLOR }),
    );
    beam.name = "beam";
    this.overlay.add(beam);

    for (const [faceId, face] of Object.entries(geometry.faces)) {
      const shape = new THREE.BufferGeometry();
      const vertices: number[] = [];
      for (let i = 1; i + 1 < face.polygon.length; i++) {
        vertices.push(...face.polygon[0]!, ...face.polygon[i]!, ...face.polygon[i + 1]!);
      }
      shape.setAttribute(
        "position",
        new THREE.Float32BufferAttribute(vertices, 3),
      );
      shape.computeVertexNormals();
      const mesh = new THREE.Mesh(
        shape,
        new THREE.MeshBasicMaterial({
          color: STATE_COLORS.pending,
          side: THREE.DoubleSide,
          transparent: true,
          opacity: 0.6,
        }),
      );
      mesh.name = faceId;
      this.overlay.add(mesh);
      this.componentNodes.set(faceId, mesh);
    }

    for (const [holeId, hole] of Object.entries(geometry.holes)) {
      const line = new THREE.Line(
        new THREE.BufferGeometry().setFromPoints([
          new THREE.Vector3(...hole.start),
          new THREE.Vector3(...hole.end),
        ]),
        new THREE.LineBasicMaterial({ color: STATE_COLORS.pending }),
      );
      line.name = holeId;
      this.overlay.add(line);
      this.componentNodes.set(holeId, line);
    }
  }

  private recolor(push: StatePush): void {
    for (const [componentId, node] of this.componentNodes) {
      const state = push.components[componentId] ?? "pending";
      const joints = push.geometry?.faces[componentId]?.joint_id;
      const selected =
        push.selected === componentId || (joints !== undefined && push.selected === joints);
      const color = selected
        ? HIGHLIGHT
        : STATE_COLORS[state] ?? STATE_COLORS.pending;
      const material = node.material as
        | THREE.MeshBasicMaterial
        | THREE.LineBasicMaterial;
      material.color.setHex(color!);
    }
  }
}
